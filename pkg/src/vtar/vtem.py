"""Video-to-event mapper: frames -> features -> pooled slots -> codebook tokens.

Shapes are batch-first throughout: frames (B, T, D_in), features (B, N, D_h),
pooled (B, M, D_p), token ids (B, M).
"""

from __future__ import annotations

import math
from collections import Counter
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from vtar.errors import FormatError, ShapeError
from vtar.numerics import Tensor, no_grad, ops, snapshot

# Instrumentation: how often each stage ran in this process.
CALLS: Counter = Counter()


@dataclass(frozen=True)
class VtemConfig:
    feature_dim: int = 32
    hidden_dim: int = 64
    window: int = 4
    stride: int = 2
    d_model: int = 64
    num_tokens: int = 16
    codebook_size: int = 64
    pool_temperature: float = 1.0
    pos_scale: float = 4.0
    decoder_hidden: int = 128
    alpha: float = 1.0
    beta: float = 0.1
    tau: float = 0.07
    commit_weight: float = 0.25
    min_usage: int = 1
    pooling: str = "adaptive"
    quantize: bool = True

    def __post_init__(self):
        if self.pooling not in ("adaptive", "fixed"):
            raise ValueError(f"pooling must be 'adaptive' or 'fixed', got {self.pooling!r}")
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.pooling == "fixed" and self.hidden_dim != self.d_model:
            raise ValueError("fixed pooling averages raw features, so hidden_dim must equal d_model")
        for name in ("alpha", "beta", "commit_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0 or self.pool_temperature <= 0:
            raise ValueError("temperatures must be > 0")


def num_segments(frames: int, window: int, stride: int) -> int:
    if frames < window:
        raise ValueError(f"sequence of {frames} frames is shorter than the window {window}")
    return (frames - window) // stride + 1


# ------------------------------------------------------------------ containers


@dataclass
class FeatureSeq:
    features: Tensor  # (B, N, D_h)

    @property
    def num_segments(self) -> int:
        return self.features.shape[1]


@dataclass
class PooledSeq:
    pooled: Tensor  # (B, M, D_p)
    attention: Tensor  # (B, M, N)


@dataclass
class EventSentence:
    token_ids: np.ndarray  # (B, M) int64
    embeddings: Tensor  # (B, M, D_e); forward values are codebook rows
    selected: Optional[Tensor] = field(default=None, repr=False)  # gathered rows, grad -> codebook


@dataclass
class Codebook:
    entries: Tensor  # (K, D_e)
    usage: np.ndarray = None  # (K,) int64

    def __post_init__(self):
        k = self.entries.shape[0]
        if self.entries.ndim != 2 or k < 2:
            raise ValueError(f"codebook needs K >= 2 rows, got shape {self.entries.shape}")
        if self.usage is None:
            self.usage = np.zeros(k, dtype=np.int64)
        if self.usage.shape != (k,) or np.any(self.usage < 0):
            raise ValueError("usage counters must be nonnegative with one per entry")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def usage_fraction(self, min_usage: int = 1) -> float:
        return float(np.mean(self.usage >= min_usage))


@dataclass
class VtemLossBreakdown:
    total: float
    recon: float
    contrastive: float
    commitment: float
    alpha: float
    beta: float
    commit_weight: float
    objective: Optional[Tensor] = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "recon": self.recon,
            "contrastive": self.contrastive,
            "commitment": self.commitment,
        }


# ------------------------------------------------------------------ layers


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = ops.matmul(x, w)
    return ops.add(y, ops.broadcast_to(b, y.shape))


def _as_batch(frames) -> Tensor:
    if isinstance(frames, Tensor):
        return frames if frames.ndim == 3 else ops.reshape(frames, (1,) + frames.shape)
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr)


class Extractor:
    """Temporal convolution (window k, stride s) + ReLU + pointwise linear."""

    def __init__(self, cfg: VtemConfig, rng: np.random.Generator):
        fan_in = cfg.window * cfg.feature_dim
        self.window, self.stride = cfg.window, cfg.stride
        self.w1 = Tensor(rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, cfg.hidden_dim)), True, "extractor.w1")
        self.b1 = Tensor(np.zeros(cfg.hidden_dim), True, "extractor.b1")
        self.w2 = Tensor(rng.normal(0, 1 / math.sqrt(cfg.hidden_dim), (cfg.hidden_dim, cfg.hidden_dim)), True, "extractor.w2")
        self.b2 = Tensor(np.zeros(cfg.hidden_dim), True, "extractor.b2")

    def parameters(self) -> dict:
        return {t.name: t for t in (self.w1, self.b1, self.w2, self.b2)}

    def __call__(self, frames: Tensor) -> Tensor:
        b, t, d = frames.shape
        n = num_segments(t, self.window, self.stride)
        starts = np.arange(n) * self.stride
        ids = (np.arange(b)[:, None, None] * t + starts[None, :, None] + np.arange(self.window)[None, None, :])
        windows = ops.gather(ops.reshape(frames, (b * t, d)), ids)
        x = ops.reshape(windows, (b, n, self.window * d))
        return affine(ops.relu(affine(x, self.w1, self.b1)), self.w2, self.b2)


@lru_cache(maxsize=64)
def positional_bias(m: int, n: int) -> np.ndarray:
    """Sinusoidal kernel between slot centres and feature positions, in [-1, 1].

    Both are placed on [0, 1]; the kernel averages ``cos(pi f delta)`` over
    ``f = 1..m``, so its main lobe is about one slot wide.
    """
    u = (np.arange(n) + 0.5) / n
    c = (np.arange(m) + 0.5) / m
    delta = u[None, :] - c[:, None]
    freqs = np.arange(1, m + 1)
    return np.cos(np.pi * freqs[:, None, None] * delta[None]).mean(axis=0)


class AdaptivePooler:
    """M learned queries attending over positions, plus a sinusoidal positional bias."""

    def __init__(self, cfg: VtemConfig, rng: np.random.Generator):
        dh, dp = cfg.hidden_dim, cfg.d_model
        self.num_slots = cfg.num_tokens
        self.temperature = cfg.pool_temperature
        self.queries = Tensor(rng.normal(0, 1.0, (cfg.num_tokens, dp)), True, "pooler.queries")
        self.wk = Tensor(rng.normal(0, 1 / math.sqrt(dh), (dh, dp)), True, "pooler.wk")
        self.wv = Tensor(rng.normal(0, 1 / math.sqrt(dh), (dh, dp)), True, "pooler.wv")
        self.pos_scale = Tensor(cfg.pos_scale, True, "pooler.pos_scale")

    def parameters(self) -> dict:
        return {t.name: t for t in (self.queries, self.wk, self.wv, self.pos_scale)}

    def value(self, h: Tensor) -> Tensor:
        return ops.matmul(h, self.wv)

    def __call__(self, h: Tensor) -> PooledSeq:
        b, n, _ = h.shape
        m = self.num_slots
        if m > n:
            raise ValueError(f"cannot pool {n} positions into {m} slots (M > N)")
        keys = ops.matmul(h, self.wk)
        dp = keys.shape[-1]
        q = ops.broadcast_to(self.queries, (b, m, dp))
        scores = ops.mul(ops.matmul(q, ops.transpose(keys)), 1.0 / math.sqrt(dp))
        bias = ops.mul(self.pos_scale, ops.constant(positional_bias(m, n)))
        logits = ops.add(scores, ops.broadcast_to(bias, (b, m, n)))
        attn = ops.softmax(ops.mul(logits, 1.0 / self.temperature), axis=-1)
        return PooledSeq(ops.matmul(attn, self.value(h)), attn)


def fixed_bins(n: int, m: int) -> np.ndarray:
    """(M, N) averaging matrix over contiguous bins; leading bins take the remainder."""
    if m > n:
        raise ValueError(f"cannot pool {n} positions into {m} slots (M > N)")
    base, rem = divmod(n, m)
    sizes = [base + 1 if i < rem else base for i in range(m)]
    out = np.zeros((m, n))
    start = 0
    for i, s in enumerate(sizes):
        out[i, start:start + s] = 1.0 / s
        start += s
    return out


def fixed_uniform_pool(h: FeatureSeq | Tensor, m: int) -> PooledSeq:
    feats = h.features if isinstance(h, FeatureSeq) else h
    b, n, _ = feats.shape
    attn = ops.constant(np.broadcast_to(fixed_bins(n, m), (b, m, n)))
    return PooledSeq(ops.matmul(attn, feats), attn)


class Decoder:
    """One-hidden-layer ReLU map from token embeddings back to pooled features."""

    def __init__(self, cfg: VtemConfig, rng: np.random.Generator, identity: bool = True):
        d, hdim = cfg.d_model, cfg.decoder_hidden
        if identity:
            if hdim < 2 * d:
                raise ValueError("identity-initialised decoder needs decoder_hidden >= 2 * d_model")
            w1 = np.zeros((d, hdim))
            w2 = np.zeros((hdim, d))
            eye = np.eye(d)
            w1[:, :d], w1[:, d:2 * d] = eye, -eye
            w2[:d], w2[d:2 * d] = eye, -eye
            w1[:, 2 * d:] = rng.normal(0, 1 / math.sqrt(d), (d, hdim - 2 * d))
        else:
            w1 = rng.normal(0, math.sqrt(2 / d), (d, hdim))
            w2 = rng.normal(0, 1 / math.sqrt(hdim), (hdim, d))
        self.w1 = Tensor(w1, True, "decoder.w1")
        self.b1 = Tensor(np.zeros(hdim), True, "decoder.b1")
        self.w2 = Tensor(w2, True, "decoder.w2")
        self.b2 = Tensor(np.zeros(d), True, "decoder.b2")

    def parameters(self) -> dict:
        return {t.name: t for t in (self.w1, self.b1, self.w2, self.b2)}

    def __call__(self, e: Tensor) -> Tensor:
        return affine(ops.relu(affine(e, self.w1, self.b1)), self.w2, self.b2)


# ------------------------------------------------------------------ operations


def extract_features(frames, extractor: Extractor) -> FeatureSeq:
    return FeatureSeq(extractor(_as_batch(frames)))


def adaptive_pool(h: FeatureSeq | Tensor, pooler: AdaptivePooler) -> PooledSeq:
    return pooler(h.features if isinstance(h, FeatureSeq) else h)


def nearest_codes(points: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the nearest entry per row of ``points``; ties go to the lowest index.

    Distances are screened with the ``|p|^2 - 2 p.c + |c|^2`` expansion, then
    every entry within rounding distance of the best is re-scored from explicit
    differences, so exact ties resolve the same way as a brute-force scan.
    """
    pn = np.sum(points * points, axis=1)
    cn = np.sum(entries * entries, axis=1)
    approx = pn[:, None] - 2.0 * (points @ entries.T) + cn[None, :]
    best = approx.min(axis=1)
    slack = 1e-9 * (pn + cn.max()) + 1e-12
    close = approx <= (best + slack)[:, None]
    ids = np.argmax(close, axis=1)
    for row in np.flatnonzero(close.sum(axis=1) > 1):
        cand = np.flatnonzero(close[row])
        diff = points[row] - entries[cand]
        ids[row] = cand[np.argmin(np.sum(diff * diff, axis=1))]
    return ids


def quantize(p: PooledSeq | Tensor, cb: Codebook, track_usage: bool = True) -> EventSentence:
    """Nearest-entry tokens with a straight-through backward rule.

    ``embeddings`` carries the codebook rows forward and routes its gradient to
    the pooled features untouched; the codebook itself only learns through
    ``selected`` (see :func:`vtem_loss`).
    """
    pooled = p.pooled if isinstance(p, PooledSeq) else p
    if cb.entries.shape[0] == 0:
        raise ValueError("quantize: empty codebook")
    if pooled.shape[-1] != cb.entries.shape[1]:
        raise ShapeError("quantize", pooled.shape, cb.entries.shape)
    CALLS["quantize"] += 1
    lead = pooled.shape[:-1]
    ids = nearest_codes(pooled.data.reshape(-1, pooled.shape[-1]), cb.entries.data).reshape(lead)
    if track_usage:
        np.add.at(cb.usage, ids.reshape(-1), 1)
    selected = ops.gather(cb.entries, ids)
    return EventSentence(ids, ops.straight_through(pooled, selected), selected)


def recon_loss(p: PooledSeq | Tensor, e: EventSentence | Tensor, decoder: Decoder) -> Tensor:
    pooled = p.pooled if isinstance(p, PooledSeq) else p
    emb = e.embeddings if isinstance(e, EventSentence) else e
    if pooled.shape != emb.shape:
        raise ShapeError("recon_loss", pooled.shape, emb.shape)
    diff = ops.sub(pooled, decoder(emb))
    return ops.mean(ops.mul(diff, diff))


@lru_cache(maxsize=32)
def _coherence_layout(b: int, m: int):
    """Additive mask over the (B*M)^2 similarity grid and the flat index of each positive."""
    total = b * m
    owner = np.repeat(np.arange(b), m)
    allowed = owner[:, None] != owner[None, :]
    anchors = np.array([i * m + j for i in range(b) for j in range(m - 1)])
    allowed[anchors, anchors + 1] = True
    mask = np.where(allowed, 0.0, -1e30)
    return mask, anchors * total + anchors + 1


def coherence_loss(e: EventSentence | Tensor, tau: float) -> Tensor:
    """InfoNCE over adjacent tokens: positive is the next token of the same sentence,
    negatives are every token of every other sentence in the batch."""
    emb = e.embeddings if isinstance(e, EventSentence) else e
    if emb.ndim != 3:
        raise ShapeError("coherence_loss", emb.shape)
    b, m, d = emb.shape
    if b < 2:
        raise ValueError("coherence_loss needs at least 2 sentences (no negatives otherwise)")
    if m < 2:
        raise ValueError("coherence_loss needs sentences of length >= 2")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    z = ops.l2_normalize(ops.reshape(emb, (b * m, d)))
    sims = ops.mul(ops.matmul(z, ops.transpose(z)), 1.0 / tau)
    mask, pos = _coherence_layout(b, m)
    logp = ops.log_softmax(ops.add(sims, ops.constant(mask)), axis=-1)
    picked = ops.gather(ops.reshape(logp, (b * m * b * m, 1)), pos)
    return ops.mul(ops.mean(picked), -1.0)


def vtem_loss(
    p: PooledSeq | Tensor,
    e: EventSentence,
    decoder: Decoder,
    alpha: float = 1.0,
    beta: float = 0.1,
    commit_weight: float = 0.25,
    tau: float = 0.07,
) -> VtemLossBreakdown:
    """Weighted reconstruction + coherence + commitment objective.

    ``commitment`` is ``mean_j ||p_j - c_j||^2``. Its gradient reaches the
    encoder with weight ``commit_weight`` and the codebook with weight 1; the
    codebook share enters the objective as a zero-valued term so that
    ``total = alpha*recon + beta*contrastive + commit_weight*commitment``.
    When ``e.selected`` is None (continuous features) the commitment is zero.
    """
    for name, v in (("alpha", alpha), ("beta", beta), ("commit_weight", commit_weight)):
        if v < 0:
            raise ValueError(f"{name} must be >= 0, got {v}")
    pooled = p.pooled if isinstance(p, PooledSeq) else p
    rec = recon_loss(pooled, e, decoder)
    cont = coherence_loss(e, tau)
    objective = ops.add(ops.mul(rec, alpha), ops.mul(cont, beta))
    commit = 0.0
    if e.selected is not None:
        diff_enc = ops.sub(pooled, ops.detach(e.selected))
        enc = ops.mean(ops.sum(ops.mul(diff_enc, diff_enc), axis=-1))
        diff_cb = ops.sub(ops.detach(pooled), e.selected)
        cbk = ops.mean(ops.sum(ops.mul(diff_cb, diff_cb), axis=-1))
        objective = ops.add(objective, ops.mul(enc, commit_weight))
        objective = ops.add(objective, ops.sub(cbk, ops.detach(cbk)))
        commit = enc.item()
    return VtemLossBreakdown(
        total=objective.item(),
        recon=rec.item(),
        contrastive=cont.item(),
        commitment=commit,
        alpha=alpha,
        beta=beta,
        commit_weight=commit_weight,
        objective=objective,
    )


# ------------------------------------------------------------------ codebook upkeep


def init_codebook(pooled: np.ndarray, k: int, seed: int) -> Codebook:
    """k-means++ seeding: first pick uniform, then proportional to squared distance."""
    pts = np.asarray(pooled, dtype=np.float64).reshape(-1, np.shape(pooled)[-1])
    if pts.shape[0] < k:
        raise ValueError(f"need at least K={k} pooled samples, got {pts.shape[0]}")
    rng = np.random.default_rng(seed)
    picks = [int(rng.integers(pts.shape[0]))]
    d2 = np.sum((pts - pts[picks[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError(f"fewer than K={k} distinct pooled samples")
        nxt = int(rng.choice(pts.shape[0], p=d2 / total))
        picks.append(nxt)
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return Codebook(Tensor(pts[picks], True, "codebook.entries"))


def reseed_dead_codes(cb: Codebook, pooled: np.ndarray, min_usage: int, seed: int) -> Codebook:
    """Replace entries used fewer than ``min_usage`` times by random pooled features.

    Returns a new codebook (usage reset to zero) and leaves ``cb`` untouched.
    With no dead entries the entries are returned unchanged.
    """
    pts = np.asarray(pooled, dtype=np.float64).reshape(-1, cb.entries.shape[1])
    dead = np.flatnonzero(cb.usage < min_usage)
    entries = cb.entries.data.copy()
    if dead.size:
        if pts.shape[0] < dead.size:
            raise ValueError(f"need at least {dead.size} pooled samples to reseed")
        rng = np.random.default_rng(seed)
        entries[dead] = pts[rng.choice(pts.shape[0], size=dead.size, replace=False)]
    return Codebook(Tensor(entries, cb.entries.requires_grad, cb.entries.name))


# ------------------------------------------------------------------ the assembled mapper


class Vtem:
    """Extractor + pooler + codebook + decoder, with the pooling/quantization switches."""

    def __init__(self, cfg: VtemConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.extractor = Extractor(cfg, rng)
        self.pooler = AdaptivePooler(cfg, rng) if cfg.pooling == "adaptive" else None
        self.decoder = Decoder(cfg, rng)
        self.codebook: Optional[Codebook] = None
        # affine map applied to event embeddings before they reach the reasoner
        self.shift = np.zeros(cfg.d_model)
        self.scale = 1.0

    def parameters(self) -> dict:
        params = dict(self.extractor.parameters())
        if self.pooler is not None:
            params.update(self.pooler.parameters())
        params.update(self.decoder.parameters())
        if self.codebook is not None:
            params["codebook.entries"] = self.codebook.entries
        return params

    def pool(self, frames) -> PooledSeq:
        h = extract_features(frames, self.extractor)
        if self.pooler is None:
            return fixed_uniform_pool(h, self.cfg.num_tokens)
        return adaptive_pool(h, self.pooler)

    def tokenize(self, frames, track_usage: bool = False):
        """Return ``(pooled, sentence)``; ``sentence`` is None for continuous features."""
        pooled = self.pool(frames)
        if not self.cfg.quantize:
            return pooled, None
        return pooled, quantize(pooled, self.codebook, track_usage=track_usage)

    def event_embeddings(self, frames, batch_size: int = 64) -> tuple:
        """Inference: ``(embeddings (B, M, D), token_ids or None)`` as numpy arrays."""
        arr = np.stack([np.asarray(f) for f in frames]) if not isinstance(frames, np.ndarray) else frames
        embs, ids = [], []
        with no_grad():
            for i in range(0, arr.shape[0], batch_size):
                pooled, sent = self.tokenize(arr[i:i + batch_size])
                if sent is None:
                    embs.append(pooled.pooled.data)
                else:
                    embs.append(sent.embeddings.data)
                    ids.append(sent.token_ids)
        return np.concatenate(embs), (np.concatenate(ids) if ids else None)

    def fit_standardiser(self, frames, batch_size: int = 64) -> None:
        """Centre on the mean training embedding and scale to unit RMS per coordinate."""
        emb, _ = self.event_embeddings(frames, batch_size)
        flat = emb.reshape(-1, emb.shape[-1])
        self.shift = flat.mean(axis=0)
        rms = float(np.sqrt(np.mean((flat - self.shift) ** 2)))
        self.scale = rms if rms > 0 else 1.0

    def reasoner_inputs(self, frames, batch_size: int = 64) -> tuple:
        """``(standardised embeddings, token ids or None)`` ready for the reasoner."""
        emb, ids = self.event_embeddings(frames, batch_size)
        return (emb - self.shift) / self.scale, ids

    def state(self) -> dict:
        out = {n: t.data for n, t in self.parameters().items()}
        out["standardiser.shift"] = self.shift
        out["standardiser.scale"] = np.array([self.scale])
        if self.codebook is not None:
            out["codebook.usage"] = self.codebook.usage.astype(np.float64)
        return out

    @property
    def checksum(self) -> str:
        st = self.state()
        return snapshot.digest(st[k] for k in sorted(st))

    def freeze(self) -> "Vtem":
        for t in self.parameters().values():
            t.freeze()
        return self


def save_vtem(vtem: Vtem, path, extra: Optional[dict] = None) -> str:
    meta = {"kind": "vtem", "config": asdict(vtem.cfg), "checksum": vtem.checksum}
    meta.update(extra or {})
    snapshot.write_archive(path, vtem.state(), meta)
    return meta["checksum"]


def load_vtem(path) -> tuple:
    tensors, meta = snapshot.read_archive(path)
    if meta.get("kind") != "vtem":
        raise FormatError(f"{path} is not a mapper checkpoint (kind={meta.get('kind')!r})", 0)
    vtem = Vtem(VtemConfig(**meta["config"]), seed=0)
    params = vtem.parameters()
    for name, t in params.items():
        if name not in tensors:
            raise FormatError(f"checkpoint lacks tensor {name}", 0)
        t.data = tensors[name].copy()
    if "codebook.entries" in tensors:
        usage = tensors["codebook.usage"].astype(np.int64)
        vtem.codebook = Codebook(Tensor(tensors["codebook.entries"], True, "codebook.entries"), usage)
    vtem.shift = tensors["standardiser.shift"].copy()
    vtem.scale = float(tensors["standardiser.scale"][0])
    if vtem.checksum != meta.get("checksum"):
        raise FormatError("mapper checkpoint checksum mismatch", 0)
    return vtem.freeze(), meta


def stack_frames(samples: Sequence) -> np.ndarray:
    return np.stack([s.frames for s in samples])
