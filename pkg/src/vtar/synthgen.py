"""Synthetic action "videos": frame-feature sequences built from sub-action scripts.

Every class is an ordering of the same ``num_concepts`` latent sub-actions with
class-specific base durations, so a classifier that ignores time order only
sees a small duration-weighted difference in the average frame. Concept means
are signed Hadamard rows, which fixes every pairwise distance at
``mean_scale * sqrt(2 * feature_dim)``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import hadamard

from vtar.errors import FormatError
from vtar.numerics import snapshot

MAGIC = b"VTAR1"
MIN_SEGMENT = 4
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class ActionScript:
    class_id: int
    segments: tuple  # ((concept_id, duration), ...)
    num_concepts: int

    def __post_init__(self):
        for concept, duration in self.segments:
            if not 0 <= concept < self.num_concepts:
                raise ValueError(f"concept {concept} outside [0, {self.num_concepts})")
            if duration < MIN_SEGMENT:
                raise ValueError(f"segment duration {duration} < {MIN_SEGMENT}")

    @property
    def total_duration(self) -> int:
        return sum(d for _, d in self.segments)

    @property
    def boundaries(self) -> list:
        """Start frame of every segment after the first."""
        starts, t = [], 0
        for _, d in self.segments[:-1]:
            t += d
            starts.append(t)
        return starts


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, D_in)
    label: int
    script: ActionScript = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.label == other.label
            and self.script == other.script
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 8
    samples_per_class: int = 64
    noise_sigma: float = 0.5
    num_concepts: int = 12
    frames: int = 176
    feature_dim: int = 32
    mean_scale: float = 2.5
    drift_scale: float = 0.05
    duration_spread: float = 0.16
    jitter: int = 1
    test_fraction: float = 0.2


def separation_bound(cfg: DataConfig) -> float:
    """Largest sigma for which concept means can sit at least 4 sigma apart."""
    return cfg.mean_scale * np.sqrt(2.0 * cfg.feature_dim) / 4.0


def _validate(cfg: DataConfig) -> None:
    if not 2 <= cfg.num_classes <= 32:
        raise ValueError(f"num_classes must lie in [2, 32], got {cfg.num_classes}")
    if cfg.samples_per_class < 8:
        raise ValueError(f"samples_per_class must be >= 8, got {cfg.samples_per_class}")
    if cfg.noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {cfg.noise_sigma}")
    d = cfg.feature_dim
    if d < 2 or d & (d - 1):
        raise ValueError(f"feature_dim must be a power of two, got {d}")
    if not 2 <= cfg.num_concepts <= d:
        raise ValueError(f"num_concepts must lie in [2, feature_dim={d}], got {cfg.num_concepts}")
    if not 32 <= cfg.frames <= 256:
        raise ValueError(f"frames must lie in [32, 256], got {cfg.frames}")
    if cfg.frames < cfg.num_concepts * (MIN_SEGMENT + 2 * cfg.jitter):
        raise ValueError(
            f"frames={cfg.frames} too short for {cfg.num_concepts} segments of "
            f">= {MIN_SEGMENT + 2 * cfg.jitter} frames"
        )
    bound = separation_bound(cfg)
    if cfg.noise_sigma > bound:
        raise ValueError(
            f"noise_sigma={cfg.noise_sigma} unsatisfiable: means on a cube of half-width "
            f"{cfg.mean_scale} in {d} dims separate by at most "
            f"{4 * bound:.4g}, so sigma must be <= {bound:.4g}"
        )


def concept_means(cfg: DataConfig, rng: np.random.Generator) -> np.ndarray:
    d = cfg.feature_dim
    rows = rng.choice(d, size=cfg.num_concepts, replace=False)
    cols = rng.permutation(d)
    signs = rng.choice([-1.0, 1.0], size=(cfg.num_concepts, 1))
    return cfg.mean_scale * signs * hadamard(d).astype(np.float64)[rows][:, cols]


def class_grammars(cfg: DataConfig, rng: np.random.Generator, candidates: int = 32) -> list:
    """Per class: (concept order, base durations summing to ``frames``).

    Duration profiles are picked greedily (farthest point first) from
    ``candidates`` Dirichlet draws per class, so no two classes end up with
    nearly the same average frame.
    """
    g = cfg.num_concepts
    floor = MIN_SEGMENT + 2 * cfg.jitter
    spare = cfg.frames - g * floor
    conc = 1.0 / max(cfg.duration_spread, 1e-6) ** 2
    pool = rng.dirichlet(np.full(g, conc), size=candidates * cfg.num_classes)
    extra = np.floor(pool * spare).astype(int)
    for row in extra:
        row[: spare - row.sum()] += 1
    chosen = [0]
    gap = np.linalg.norm(extra - extra[0], axis=1).astype(float)
    while len(chosen) < cfg.num_classes:
        nxt = int(np.argmax(gap))
        chosen.append(nxt)
        gap = np.minimum(gap, np.linalg.norm(extra - extra[nxt], axis=1))

    orders, grammars = set(), []
    for k in chosen:
        while True:
            order = tuple(int(i) for i in rng.permutation(g))
            if order not in orders:
                orders.add(order)
                break
        durations = np.empty(g, dtype=int)
        durations[list(order)] = floor + extra[k]
        grammars.append((order, [int(durations[c]) for c in order]))
    return grammars


def _render(order, durations, means, drifts, sigma, rng) -> np.ndarray:
    chunks = []
    for concept, dur in zip(order, durations):
        t = np.arange(dur, dtype=np.float64)[:, None]
        seg = means[concept] + drifts[concept] * t
        if sigma > 0:
            seg = seg + sigma * rng.standard_normal(seg.shape)
        chunks.append(seg)
    return np.concatenate(chunks, axis=0)


def _jittered(durations, jitter, rng) -> list:
    if jitter == 0:
        return list(durations)
    shifts = rng.integers(-jitter, jitter + 1, size=len(durations) - 1)
    out = list(durations)
    for k, s in enumerate(shifts):
        out[k] += int(s)
        out[k + 1] -= int(s)
    return out


def generate_dataset(
    num_classes: int = 8,
    samples_per_class: int = 64,
    noise_sigma: float = 0.5,
    seed: int = 0,
    config: DataConfig | None = None,
) -> tuple:
    """Return ``(train, test)`` lists of :class:`VideoSample`.

    Passing ``config`` overrides the three leading arguments. The split is
    per class: the last ``round(test_fraction * n)`` samples of every class
    go to the test list.
    """
    cfg = config or DataConfig(
        num_classes=num_classes, samples_per_class=samples_per_class, noise_sigma=noise_sigma
    )
    _validate(cfg)
    root = np.random.SeedSequence(seed)
    world_ss, sample_ss = root.spawn(2)
    world = np.random.default_rng(world_ss)
    means = concept_means(cfg, world)
    drifts = world.standard_normal((cfg.num_concepts, cfg.feature_dim))
    drifts *= cfg.drift_scale / np.sqrt(cfg.feature_dim)
    grammars = class_grammars(cfg, world)

    n = cfg.samples_per_class
    n_test = max(1, int(round(cfg.test_fraction * n)))
    streams = sample_ss.spawn(cfg.num_classes * n)
    train, test = [], []
    for c, (order, base) in enumerate(grammars):
        for i in range(n):
            rng = np.random.default_rng(streams[c * n + i])
            durations = _jittered(base, cfg.jitter, rng)
            frames = _render(order, durations, means, drifts, cfg.noise_sigma, rng)
            script = ActionScript(c, tuple(zip(order, durations)), cfg.num_concepts)
            sample = VideoSample(frames, c, script)
            (test if i >= n - n_test else train).append(sample)
    return train, test


# ---------------------------------------------------------------- diagnostics


def centroid_accuracy(train: Sequence[VideoSample], test: Sequence[VideoSample]) -> float:
    """Nearest class centroid on the time-averaged frame (order-blind baseline)."""
    labels = np.array([s.label for s in train])
    feats = np.stack([s.frames.mean(axis=0) for s in train])
    classes = np.unique(labels)
    cents = np.stack([feats[labels == c].mean(axis=0) for c in classes])
    hits = 0
    for s in test:
        d = ((cents - s.frames.mean(axis=0)) ** 2).sum(axis=1)
        hits += int(classes[np.argmin(d)] == s.label)
    return hits / len(test)


def detect_change_points(frames: np.ndarray, threshold: float | None = None) -> list:
    """Frame indices where a new segment starts, from jumps in consecutive frames."""
    steps = np.linalg.norm(np.diff(frames, axis=0), axis=1)
    if threshold is None:
        threshold = 0.5 * steps.max() if steps.size else 0.0
    return [int(t) + 1 for t in np.flatnonzero(steps > threshold)]


# ------------------------------------------------------------------ file I/O


def encode_dataset(samples: Sequence[VideoSample]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_U64.pack(len(samples)))
    for s in samples:
        t, d = s.frames.shape
        out.write(_U64.pack(s.label))
        out.write(_U64.pack(t))
        out.write(_U64.pack(d))
        out.write(_U64.pack(s.script.num_concepts))
        out.write(_U64.pack(len(s.script.segments)))
        for concept, dur in s.script.segments:
            out.write(_U64.pack(concept))
            out.write(_U64.pack(dur))
        out.write(snapshot.encode(s.frames))
    return out.getvalue()


def decode_dataset(buf: bytes) -> list:
    r = snapshot.Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad dataset magic, expected b'VTAR1'", 0)
    count = r.u64("record count")
    samples = []
    for k in range(count):
        start = r.pos
        label = r.u64(f"record {k} label")
        t = r.u64(f"record {k} T")
        d = r.u64(f"record {k} D_in")
        g = r.u64(f"record {k} concept count")
        nseg = r.u64(f"record {k} segment count")
        if nseg > t:
            raise FormatError(f"record {k}: {nseg} segments for {t} frames", start)
        segs = tuple((r.u64("concept"), r.u64("duration")) for _ in range(nseg))
        frames_at = r.pos
        frames = r.tensor(f"record {k} frames")
        if frames.shape != (t, d):
            raise FormatError(f"record {k}: frame matrix {frames.shape} != ({t}, {d})", frames_at)
        try:
            script = ActionScript(label, segs, g)
        except ValueError as exc:
            raise FormatError(f"record {k}: {exc}", start) from None
        if script.total_duration != t:
            raise FormatError(f"record {k}: segments cover {script.total_duration} of {t} frames", start)
        samples.append(VideoSample(frames, label, script))
    if not r.exhausted:
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return samples


def write_dataset(samples: Sequence[VideoSample], path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(samples))


def read_dataset(path) -> list:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
