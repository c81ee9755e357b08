"""Two-phase training, the six-variant ablation matrix and the M/K sweeps."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from vtar import reasoner as rsn
from vtar import vtem as vt
from vtar.errors import GateFailure, NonFiniteError, VariantMismatchError
from vtar.numerics import Graph, backward, no_grad
from vtar.pipeline.config import RunConfig
from vtar.pipeline.optim import AdamW, AdamWConfig
from vtar.pipeline.report import RunReport
from vtar.synthgen import VideoSample, generate_dataset
from vtar.vtem import stack_frames


class AblationVariant(str, Enum):
    FULL = "full"
    CONTINUOUS_FEATURES = "continuous_features"
    FIXED_POOLING = "fixed_pooling"
    NO_COHERENCE = "no_coherence"
    FULL_FINETUNE = "full_finetune"
    ZERO_SHOT = "zero_shot"

    @classmethod
    def parse(cls, name: str) -> "AblationVariant":
        try:
            return cls(name)
        except ValueError:
            raise VariantMismatchError(
                f"unknown variant {name!r}; choose from {', '.join(v.value for v in cls)}"
            ) from None


VARIANTS = tuple(AblationVariant)

# row labels of the comparison table
VARIANT_LABELS = {
    AblationVariant.FULL: "Full model",
    AblationVariant.CONTINUOUS_FEATURES: "w/o Conceptual Quantization (Continuous Features)",
    AblationVariant.FIXED_POOLING: "w/o Adaptive Temporal Pooling (Fixed Sampling)",
    AblationVariant.NO_COHERENCE: "w/o Event Coherence Bias (Reconstruction Only)",
    AblationVariant.FULL_FINETUNE: "Full LVLM Fine-tuning",
    AblationVariant.ZERO_SHOT: "Zero-Shot LVLM",
}


def vtem_config_for(variant: AblationVariant, base: vt.VtemConfig) -> vt.VtemConfig:
    """Mapper configuration a variant trains with."""
    variant = AblationVariant(variant)
    if variant is AblationVariant.CONTINUOUS_FEATURES:
        return dataclasses.replace(base, quantize=False)
    if variant is AblationVariant.FIXED_POOLING:
        return dataclasses.replace(base, pooling="fixed")
    if variant is AblationVariant.NO_COHERENCE:
        return dataclasses.replace(base, beta=0.0)
    return base


def _adamw(cfg: RunConfig, lr: float) -> AdamWConfig:
    t = cfg.train
    return AdamWConfig(lr=lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay)


# ------------------------------------------------------------------ phase 1


def smoothed(losses: Sequence[float], window: int = 100) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    if x.size == 0:
        return x
    w = min(window, x.size)
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[w:] - c[:-w]) / w


def run_vtem_phase(
    train: Sequence[VideoSample],
    cfg: RunConfig,
    seed: int,
    vtem_cfg: Optional[vt.VtemConfig] = None,
    variant: AblationVariant = AblationVariant.FULL,
) -> tuple:
    """Train the mapper on ``train``; returns ``(vtem, report)``.

    Dead codes are reseeded at every epoch boundary (``ceil(n / batch)``
    steps); the usage fraction in the report covers the last epoch.
    """
    if len(train) == 0:
        raise ValueError("run_vtem_phase: empty training set")
    vcfg = vtem_cfg or cfg.vtem
    tc = cfg.train
    frames = stack_frames(train)
    n = frames.shape[0]
    batch = min(tc.vtem_batch, n)
    start = time.perf_counter()
    calls_before = vt.CALLS["quantize"]

    vtem = vt.Vtem(vcfg, seed)
    if vcfg.quantize:
        with no_grad():
            pooled = vtem.pool(frames[: max(batch, 8 * batch)]).pooled.data
        vtem.codebook = vt.init_codebook(pooled.reshape(-1, vcfg.d_model), vcfg.codebook_size, seed)
    opt = AdamW(vtem.parameters(), _adamw(cfg, tc.vtem_lr))
    rng = np.random.default_rng(seed)
    epoch = math.ceil(n / batch)
    report = RunReport(variant=AblationVariant(variant).value, digest=cfg.digest, seed=seed, phase="vtem")
    losses, window, epoch_pooled = [], [], []
    usage_fraction = None

    for step in range(tc.vtem_iterations):
        idx = rng.choice(n, size=batch, replace=False)
        with Graph():
            pooled, sent = vtem.tokenize(frames[idx], track_usage=True)
            if sent is None:
                sent = vt.EventSentence(None, pooled.pooled, None)
            bd = vt.vtem_loss(pooled, sent, vtem.decoder, vcfg.alpha, vcfg.beta, vcfg.commit_weight, vcfg.tau)
            if not np.isfinite(bd.total):
                raise NonFiniteError(f"run_vtem_phase: non-finite loss at step {step}")
            opt.zero_grad()
            backward(bd.objective)
        opt.step()
        losses.append(bd.total)
        window.append(bd.as_dict())
        if vcfg.quantize:
            epoch_pooled.append(pooled.pooled.data.reshape(-1, vcfg.d_model))
        if (step + 1) % tc.log_interval == 0 or step + 1 == tc.vtem_iterations:
            means = {k: float(np.mean([w[k] for w in window])) for k in window[0]}
            report.log(step=step + 1, **means)
            window = []
        if vcfg.quantize and (step + 1) % epoch == 0:
            usage_fraction = vtem.codebook.usage_fraction(vcfg.min_usage)
            if step + 1 < tc.vtem_iterations:
                vtem.codebook = vt.reseed_dead_codes(
                    vtem.codebook, np.concatenate(epoch_pooled), vcfg.min_usage, seed * 1_000_003 + step
                )
                opt.params["codebook.entries"] = vtem.codebook.entries
                opt.state.m.pop("codebook.entries", None)
                opt.state.v.pop("codebook.entries", None)
            epoch_pooled = []

    if vcfg.quantize and usage_fraction is None:
        usage_fraction = vtem.codebook.usage_fraction(vcfg.min_usage)
    vtem.fit_standardiser(frames)
    vtem.freeze()
    sm = smoothed(losses)
    report.summary.update(
        loss_start=float(sm[0]),
        loss_end=float(sm[-1]),
        codebook_usage=usage_fraction,
        quantize_calls=vt.CALLS["quantize"] - calls_before,
        vtem_checksum=vtem.checksum,
    )
    report.wall_clock = time.perf_counter() - start
    return vtem, report


# ------------------------------------------------------------------ reasoner cache

_PRETRAINED: dict = {}


def pretrained_reasoner(cfg: RunConfig) -> rsn.PretrainResult:
    """Pretrained frozen reasoner, memoised per (reasoner config, pretraining settings)."""
    tc = cfg.train
    pcfg = rsn.PretrainConfig(
        steps=tc.pretrain_steps,
        batch=tc.pretrain_batch,
        length=tc.pretrain_length,
        lr=tc.pretrain_lr,
        weight_decay=tc.weight_decay,
    )
    key = (cfg.reasoner, pcfg, tc.reasoner_seed)
    if key not in _PRETRAINED:
        _PRETRAINED[key] = rsn.pretrain_reasoner(cfg.reasoner, tc.reasoner_seed, pcfg)
    return _PRETRAINED[key]


# ------------------------------------------------------------------ phase 2


@dataclass
class PromptPhaseResult:
    prompts: rsn.PromptBank
    weights: rsn.FrozenWeights
    report: RunReport
    test_probs: np.ndarray
    test_pred: np.ndarray


def check_variant_state(variant: AblationVariant, vtem: vt.Vtem, prompts: Optional[rsn.PromptBank]) -> None:
    """Reject mapper/prompt states that contradict the variant."""
    v = AblationVariant(variant)
    if v is AblationVariant.CONTINUOUS_FEATURES and vtem.cfg.quantize:
        raise VariantMismatchError("continuous_features needs a mapper trained without quantization")
    if v is not AblationVariant.CONTINUOUS_FEATURES and not vtem.cfg.quantize:
        raise VariantMismatchError(f"{v.value} needs a quantizing mapper")
    if (vtem.cfg.pooling == "fixed") != (v is AblationVariant.FIXED_POOLING):
        raise VariantMismatchError(f"{v.value} cannot run on a mapper with {vtem.cfg.pooling} pooling")
    if v is AblationVariant.NO_COHERENCE and vtem.cfg.beta != 0:
        raise VariantMismatchError("no_coherence needs a mapper trained with beta = 0")
    if v is AblationVariant.ZERO_SHOT and prompts is not None and prompts.length > 0:
        raise VariantMismatchError(f"zero_shot takes no prompts, got a bank of length {prompts.length}")


def run_prompt_phase(
    vtem: vt.Vtem,
    weights: rsn.FrozenWeights,
    train: Sequence[VideoSample],
    test: Sequence[VideoSample],
    cfg: RunConfig,
    variant: AblationVariant,
    seed: int,
    prompts: Optional[rsn.PromptBank] = None,
) -> PromptPhaseResult:
    variant = AblationVariant(variant)
    check_variant_state(variant, vtem, prompts)
    tc = cfg.train
    start = time.perf_counter()
    checksum_before = weights.checksum
    x_train, _ = vtem.reasoner_inputs(stack_frames(train))
    x_test, _ = vtem.reasoner_inputs(stack_frames(test))
    y_train = np.array([s.label for s in train])
    y_test = np.array([s.label for s in test])

    full_ft = variant is AblationVariant.FULL_FINETUNE
    if variant is AblationVariant.ZERO_SHOT:
        bank = rsn.PromptBank.empty(cfg.reasoner)
        tuned_weights = weights
        losses = []
    else:
        bank = prompts if prompts is not None else rsn.PromptBank.init(cfg.reasoner, seed)
        tuned_weights = weights.trainable_copy() if full_ft else weights
        tcfg = rsn.TuneConfig(
            steps=tc.prompt_iterations,
            batch=tc.prompt_batch,
            lr=tc.finetune_lr if full_ft else tc.prompt_lr,
            weight_decay=tc.weight_decay,
            beta1=tc.beta1,
            beta2=tc.beta2,
            eps=tc.eps,
        )
        res = rsn.tune_prompts(tuned_weights, bank, x_train, y_train, tcfg, seed)
        bank, losses = res.prompts, res.losses

    if weights.checksum != checksum_before:
        raise GateFailure("frozen reasoner weights changed during adaptation")
    total, trainable, ratio = rsn.count_params(tuned_weights, bank, full_finetune=full_ft)
    if variant is AblationVariant.ZERO_SHOT:
        trainable, ratio = 0, 0.0
    p_train, pred_train = rsn.predict_batch(tuned_weights, bank, x_train)
    p_test, pred_test = rsn.predict_batch(tuned_weights, bank, x_test)
    for probs in (p_train, p_test):
        if not np.all(np.isfinite(probs)):
            raise NonFiniteError("run_prompt_phase: non-finite class probabilities")

    report = RunReport(variant=variant.value, digest=cfg.digest, seed=seed, phase="prompts")
    for i in range(0, len(losses), tc.log_interval):
        chunk = losses[i:i + tc.log_interval]
        report.log(step=i + len(chunk), loss=float(np.mean(chunk)))
    report.summary.update(
        train_accuracy=float(np.mean(pred_train == y_train)),
        test_accuracy=float(np.mean(pred_test == y_test)),
        total_params=int(total),
        trainable_params=int(trainable),
        trainable_ratio=float(ratio),
        frozen_checksum=checksum_before,
        prob_sum_max_dev=float(max(np.abs(p_train.sum(1) - 1).max(), np.abs(p_test.sum(1) - 1).max())),
        prob_min=float(min(p_train.min(), p_test.min())),
    )
    report.wall_clock = time.perf_counter() - start
    return PromptPhaseResult(bank, tuned_weights, report, p_test, pred_test)


# ------------------------------------------------------------------ whole runs


@dataclass
class VariantRun:
    variant: AblationVariant
    seed: int
    vtem_report: RunReport
    prompt: PromptPhaseResult

    @property
    def test_accuracy(self) -> float:
        return self.prompt.report.summary["test_accuracy"]

    def summary(self) -> dict:
        out = {"variant": self.variant.value, "seed": self.seed}
        out.update(self.prompt.report.summary)
        out["codebook_usage"] = self.vtem_report.summary["codebook_usage"]
        out["quantize_calls"] = self.vtem_report.summary["quantize_calls"] + self.prompt.report.summary.get(
            "quantize_calls", 0
        )
        out["vtem_loss_start"] = self.vtem_report.summary["loss_start"]
        out["vtem_loss_end"] = self.vtem_report.summary["loss_end"]
        return out


def dataset_for(cfg: RunConfig, seed: int) -> tuple:
    return generate_dataset(seed=seed, config=cfg.data)


def run_variant(
    cfg: RunConfig,
    variant: AblationVariant,
    seed: int,
    data: Optional[tuple] = None,
    vtem_cache: Optional[dict] = None,
) -> VariantRun:
    """Both phases for one variant. ``vtem_cache`` lets variants that share a
    mapper configuration (full, full_finetune, zero_shot) train it once."""
    variant = AblationVariant(variant)
    train, test = data if data is not None else dataset_for(cfg, seed)
    vcfg = vtem_config_for(variant, cfg.vtem)
    key = (vcfg, seed)
    if vtem_cache is not None and key in vtem_cache:
        vtem, vrep = vtem_cache[key]
    else:
        vtem, vrep = run_vtem_phase(train, cfg, seed, vcfg, variant)
        if vtem_cache is not None:
            vtem_cache[key] = (vtem, vrep)
    weights = pretrained_reasoner(cfg).weights
    before = vt.CALLS["quantize"]
    res = run_prompt_phase(vtem, weights, train, test, cfg, variant, seed)
    res.report.summary["quantize_calls"] = vt.CALLS["quantize"] - before
    return VariantRun(variant, seed, vrep, res)


# ------------------------------------------------------------------ ablation suite


@dataclass
class AblationResult:
    runs: list = field(default_factory=list)  # VariantRun
    seeds: tuple = ()

    def accuracy(self, variant: AblationVariant) -> np.ndarray:
        return np.array([r.test_accuracy for r in self.runs if r.variant is AblationVariant(variant)])

    def mean_accuracy(self) -> dict:
        return {v.value: float(self.accuracy(v).mean()) for v in VARIANTS if self.accuracy(v).size}

    def pairwise_deltas(self) -> dict:
        means = self.mean_accuracy()
        out = {}
        for a in means:
            for b in means:
                if a != b:
                    out[f"{a} - {b}"] = means[a] - means[b]
        return out

    def ordering(self) -> list:
        """Adjacent mean deltas along full >= no_coherence >= fixed_pooling >= continuous_features."""
        chain = ["full", "no_coherence", "fixed_pooling", "continuous_features"]
        means = self.mean_accuracy()
        rows = []
        for a, b in zip(chain, chain[1:]):
            if a in means and b in means:
                d = means[a] - means[b]
                rows.append({"pair": f"{a} >= {b}", "delta": d, "holds": bool(d >= 0)})
        return rows

    def gap_per_seed(self) -> dict:
        out = {}
        for s in self.seeds:
            acc = {r.variant.value: r.test_accuracy for r in self.runs if r.seed == s}
            if "full" in acc and "zero_shot" in acc:
                out[s] = acc["full"] - acc["zero_shot"]
        return out


def ablation_suite(
    cfg: RunConfig,
    seeds: Sequence[int],
    variants: Sequence[AblationVariant] = VARIANTS,
    progress: Optional[Callable[[VariantRun], None]] = None,
    enforce_gate: bool = True,
) -> AblationResult:
    """Every variant on every seed; the full > zero_shot gate is enforced per seed."""
    result = AblationResult(seeds=tuple(seeds))
    for seed in seeds:
        data = dataset_for(cfg, seed)
        cache: dict = {}
        for variant in variants:
            variant = AblationVariant(variant)
            try:
                run = run_variant(cfg, variant, seed, data, cache)
            except (GateFailure, VariantMismatchError):
                raise
            except Exception as exc:
                exc.args = (f"variant {variant.value} (seed {seed}) failed: {exc}",) + exc.args[1:]
                raise
            result.runs.append(run)
            if progress:
                progress(run)
    if enforce_gate:
        for seed, gap in result.gap_per_seed().items():
            if not gap > 0:
                raise GateFailure(f"full does not beat zero_shot on seed {seed} (gap {gap:+.4f})")
    return result


# ------------------------------------------------------------------ sweeps


SWEEP_AXES = {"M": ("vtem", "num_tokens"), "K": ("vtem", "codebook_size")}


@dataclass
class SweepCell:
    axis: str
    value: int
    seed: int
    test_accuracy: Optional[float] = None
    codebook_usage: Optional[float] = None
    error: Optional[str] = None
    prob_sum_max_dev: Optional[float] = None
    prob_min: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def sweep(
    axis: str,
    values: Sequence[int],
    cfg: RunConfig,
    seeds: Sequence[int],
    progress: Optional[Callable[[SweepCell], None]] = None,
    known: Optional[dict] = None,
) -> list:
    """One full two-phase run per (value, seed). Invalid cells are recorded, not raised.

    ``known`` maps ``(config digest, seed)`` to finished full-variant runs; runs
    are deterministic, so a matching cell reuses the result instead of retraining.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if len(values) == 0:
        raise ValueError("sweep needs at least one value")
    section, key = SWEEP_AXES[axis]
    cells = []
    for value in values:
        for seed in seeds:
            cell = SweepCell(axis, int(value), seed)
            try:
                run_cfg = cfg.replace(section, **{key: int(value)})
                _check_sweep_value(run_cfg)
                run = (known or {}).get((run_cfg.digest, seed))
                if run is None:
                    run = run_variant(run_cfg, AblationVariant.FULL, seed)
                cell.test_accuracy = run.test_accuracy
                cell.codebook_usage = run.vtem_report.summary["codebook_usage"]
                cell.prob_sum_max_dev = run.prompt.report.summary["prob_sum_max_dev"]
                cell.prob_min = run.prompt.report.summary["prob_min"]
            except (ValueError, NonFiniteError) as exc:
                cell.error = str(exc).splitlines()[0]
            except Exception as exc:  # a broken cell must not take the sweep down
                cell.error = f"{type(exc).__name__}: {exc}"
            cells.append(cell)
            if progress:
                progress(cell)
    return cells


def _check_sweep_value(cfg: RunConfig) -> None:
    n = vt.num_segments(cfg.data.frames, cfg.vtem.window, cfg.vtem.stride)
    if cfg.vtem.num_tokens > n:
        raise ValueError(f"M={cfg.vtem.num_tokens} exceeds the {n} feature positions")
    need = cfg.reasoner.max_sequence(cfg.vtem.num_tokens)
    if need > cfg.reasoner.max_positions:
        raise ValueError(f"sequence of {need} positions exceeds max_positions={cfg.reasoner.max_positions}")


def sweep_table(cells: Sequence[SweepCell]) -> list:
    """Per value: mean and sd of accuracy and usage over the successful seeds."""
    rows = []
    for value in sorted({c.value for c in cells}):
        group = [c for c in cells if c.value == value]
        ok = [c for c in group if c.ok]
        acc = np.array([c.test_accuracy for c in ok])
        use = np.array([c.codebook_usage for c in ok if c.codebook_usage is not None])
        rows.append(
            {
                "axis": group[0].axis,
                "value": value,
                "runs": len(ok),
                "failed": len(group) - len(ok),
                "acc_mean": float(acc.mean()) if acc.size else None,
                "acc_sd": float(acc.std(ddof=1)) if acc.size > 1 else (0.0 if acc.size else None),
                "usage_mean": float(use.mean()) if use.size else None,
                "usage_sd": float(use.std(ddof=1)) if use.size > 1 else (0.0 if use.size else None),
            }
        )
    return rows
