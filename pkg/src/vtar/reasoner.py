"""Small frozen causal transformer adapted through per-layer key/value prompt prefixes.

Vocabulary layout (reserved ranges):
    [0, instruction_length)           instruction tokens
    [v0, v0 + num_classes)            verbalizer, one token per class
    v0 + num_classes                  answer marker
with ``v0 = instruction_length``. Remaining ids are only used by the
pretraining proxy task.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from vtar.errors import NonFiniteError, ShapeError
from vtar.numerics import Graph, Tensor, backward, no_grad, ops
from vtar.numerics import snapshot


@dataclass(frozen=True)
class ReasonerConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 64
    num_classes: int = 8
    instruction_length: int = 8
    prompt_length: int = 16
    max_positions: int = 128
    embed_std: float = 1.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.answer_token >= self.vocab_size:
            raise ValueError(
                f"reserved ids need {self.answer_token + 1} tokens, vocab_size is {self.vocab_size}"
            )
        if self.prompt_length < 0:
            raise ValueError("prompt_length must be >= 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def instruction_tokens(self) -> tuple:
        return tuple(range(self.instruction_length))

    @property
    def verbalizer(self) -> tuple:
        v0 = self.instruction_length
        return tuple(range(v0, v0 + self.num_classes))

    @property
    def answer_token(self) -> int:
        return self.instruction_length + self.num_classes

    def max_sequence(self, num_events: int, prompt_length: Optional[int] = None) -> int:
        lp = self.prompt_length if prompt_length is None else prompt_length
        return num_events + lp + self.instruction_length + 1


# ------------------------------------------------------------------ state


def _layer_names(i: int) -> tuple:
    return tuple(f"layer{i}.{n}" for n in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"))


def init_params(cfg: ReasonerConfig, rng: np.random.Generator) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    out = {
        "tok_emb": rng.normal(0, cfg.embed_std, (cfg.vocab_size, d)),
        "pos_emb": rng.normal(0, cfg.embed_std, (cfg.max_positions, d)),
    }
    for i in range(cfg.layers):
        wq, wk, wv, wo, w1, b1, w2, b2 = _layer_names(i)
        out[wq] = rng.normal(0, 1 / math.sqrt(d), (d, d))
        out[wk] = rng.normal(0, 1 / math.sqrt(d), (d, d))
        out[wv] = rng.normal(0, 1 / math.sqrt(d), (d, d))
        out[wo] = rng.normal(0, 1 / math.sqrt(d), (d, d))
        out[w1] = rng.normal(0, 1 / math.sqrt(d), (d, f))
        out[b1] = np.zeros(f)
        out[w2] = rng.normal(0, 1 / math.sqrt(f), (f, d))
        out[b2] = np.zeros(d)
    return out


class FrozenWeights:
    """Transformer parameters plus token table; checksum over the byte-exact snapshot."""

    def __init__(self, cfg: ReasonerConfig, params: dict, freeze: bool = True):
        self.cfg = cfg
        self.params = {}
        for name, arr in params.items():
            t = arr if isinstance(arr, Tensor) else Tensor(arr, False, name)
            t.name = name
            self.params[name] = t.freeze() if freeze else t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def frozen(self) -> bool:
        return all(t.frozen for t in self.params.values())

    @property
    def checksum(self) -> str:
        return snapshot.digest(self.params[n].data for n in sorted(self.params))

    def count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def trainable_copy(self) -> "FrozenWeights":
        """Unfrozen clone with every tensor requiring grad (full fine-tuning)."""
        clone = FrozenWeights(self.cfg, {n: t.data.copy() for n, t in self.params.items()}, freeze=False)
        for t in clone.params.values():
            t.requires_grad = True
        return clone


class PromptBank:
    """Per-layer key and value prefixes, each ``(heads, L, d_head)``."""

    def __init__(self, keys: Sequence[Tensor], values: Sequence[Tensor]):
        if len(keys) != len(values):
            raise ValueError("need one key and one value prefix per layer")
        shapes = {k.shape for k in keys} | {v.shape for v in values}
        if len(shapes) > 1:
            raise ShapeError("PromptBank", *sorted(shapes))
        self.keys = list(keys)
        self.values = list(values)

    @classmethod
    def empty(cls, cfg: ReasonerConfig) -> "PromptBank":
        return cls([], [])

    @classmethod
    def init(cls, cfg: ReasonerConfig, seed: int, length: Optional[int] = None, scale: float = 1.0):
        length = cfg.prompt_length if length is None else length
        if length == 0:
            return cls.empty(cfg)
        rng = np.random.default_rng(seed)
        shape = (cfg.heads, length, cfg.d_head)
        keys = [Tensor(rng.normal(0, scale, shape), True, f"prompt.k{i}") for i in range(cfg.layers)]
        values = [Tensor(rng.normal(0, scale, shape), True, f"prompt.v{i}") for i in range(cfg.layers)]
        return cls(keys, values)

    @property
    def length(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0

    def parameters(self) -> dict:
        return {t.name: t for t in self.keys + self.values}

    def count(self) -> int:
        return int(sum(t.size for t in self.keys + self.values))

    def arrays(self) -> dict:
        return {n: t.data.copy() for n, t in self.parameters().items()}

    def clone(self) -> "PromptBank":
        keys = [Tensor(t.data, t.requires_grad, t.name) for t in self.keys]
        values = [Tensor(t.data, t.requires_grad, t.name) for t in self.values]
        return PromptBank(keys, values)


@dataclass
class Prediction:
    class_probs: np.ndarray
    predicted: int

    def __post_init__(self):
        p = self.class_probs
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("class_probs is not a probability vector")


def count_params(weights: FrozenWeights, prompts: PromptBank, full_finetune: bool = False) -> tuple:
    """``(total, trainable, trainable / total)`` by enumeration."""
    frozen = weights.count()
    bank = prompts.count()
    total = frozen + bank
    if full_finetune:
        trainable = total
    else:
        trainable = bank + sum(t.size for t in weights.params.values() if t.requires_grad)
    return total, int(trainable), trainable / total


# ------------------------------------------------------------------ forward pass


@dataclass
class ModelInput:
    x: Tensor  # (B, S, d) residual stream before the first block
    prompts: PromptBank
    positions: np.ndarray  # (S,)


def _causal_mask(s: int, prefix: int) -> np.ndarray:
    mask = np.zeros((s, prefix + s))
    mask[:, prefix:][np.triu_indices(s, 1)] = -1e30
    return mask


def assemble_input(
    prompts: PromptBank,
    events,
    weights: FrozenWeights,
    instruction: Optional[Sequence[int]] = None,
) -> ModelInput:
    """[events; instruction; answer marker] with positions offset by the prompt length.

    ``events`` is a (B, M, d) Tensor/array of continuous event embeddings; the
    prompts only enter later, as key/value prefixes inside every layer.
    """
    cfg = weights.cfg
    ev = events if isinstance(events, Tensor) else ops.constant(np.asarray(events, dtype=np.float64))
    if ev.ndim == 2:
        ev = ops.reshape(ev, (1,) + ev.shape)
    b, m, d = ev.shape
    if d != cfg.d_model:
        raise ShapeError("assemble_input", ev.shape, (b, m, cfg.d_model))
    instr = cfg.instruction_tokens if instruction is None else tuple(instruction)
    lp = prompts.length
    total = lp + m + len(instr) + 1
    if total > cfg.max_positions:
        raise ValueError(
            f"sequence overflow: {lp} prompts + {m} events + {len(instr)} instruction + 1 answer "
            f"= {total} > {cfg.max_positions} positions"
        )
    ids = np.array(list(instr) + [cfg.answer_token], dtype=np.int64)
    text = ops.gather(weights["tok_emb"], np.broadcast_to(ids, (b, ids.size)))
    x = ops.concat([ev, text], axis=1)
    positions = np.arange(lp, lp + x.shape[1])
    pos = ops.gather(weights["pos_emb"], positions)
    x = ops.add(x, ops.broadcast_to(pos, x.shape))
    return ModelInput(x, prompts, positions)


def _heads(x: Tensor, b: int, s: int, h: int, dh: int) -> Tensor:
    return ops.transpose(ops.reshape(x, (b, s, h, dh)), (0, 2, 1, 3))


def attention_block(x: Tensor, w: FrozenWeights, i: int, prompts: PromptBank) -> tuple:
    """Pre-LN causal self-attention with optional key/value prefixes; returns (out, attn)."""
    cfg = w.cfg
    b, s, d = x.shape
    h, dh = cfg.heads, cfg.d_head
    wq, wk, wv, wo = _layer_names(i)[:4]
    z = ops.layer_norm(x)
    q = _heads(ops.matmul(z, w[wq]), b, s, h, dh)
    k = _heads(ops.matmul(z, w[wk]), b, s, h, dh)
    v = _heads(ops.matmul(z, w[wv]), b, s, h, dh)
    lp = prompts.length
    if lp:
        pk = ops.broadcast_to(ops.reshape(prompts.keys[i], (1, h, lp, dh)), (b, h, lp, dh))
        pv = ops.broadcast_to(ops.reshape(prompts.values[i], (1, h, lp, dh)), (b, h, lp, dh))
        k = ops.concat([pk, k], axis=2)
        v = ops.concat([pv, v], axis=2)
    scores = ops.mul(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(dh))
    mask = ops.constant(np.broadcast_to(_causal_mask(s, lp), scores.shape))
    attn = ops.softmax(ops.add(scores, mask), axis=-1)
    ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (b, s, d))
    return ops.matmul(ctx, w[wo]), attn


def mlp_block(x: Tensor, w: FrozenWeights, i: int) -> Tensor:
    w1, b1, w2, b2 = _layer_names(i)[4:]
    z = ops.layer_norm(x)
    hid = ops.matmul(z, w[w1])
    hid = ops.gelu(ops.add(hid, ops.broadcast_to(w[b1], hid.shape)))
    out = ops.matmul(hid, w[w2])
    return ops.add(out, ops.broadcast_to(w[b2], out.shape))


def transformer(x: Tensor, w: FrozenWeights, prompts: PromptBank, keep_attention: bool = False):
    """Run every block; returns the final normalised stream (and attentions if asked)."""
    attns = []
    for i in range(w.cfg.layers):
        a, attn = attention_block(x, w, i, prompts)
        x = ops.add(x, a)
        x = ops.add(x, mlp_block(x, w, i))
        if keep_attention:
            attns.append(attn.data)
    z = ops.layer_norm(x)
    return (z, attns) if keep_attention else z


def lm_logits(z: Tensor, w: FrozenWeights) -> Tensor:
    """Tied unembedding: (..., d) @ tok_emb^T."""
    return ops.matmul(z, ops.transpose(w["tok_emb"]))


def verbalizer_logits(weights: FrozenWeights, prompts: PromptBank, events, instruction=None) -> Tensor:
    """(B, C) logits of the class tokens at the answer-marker position."""
    cfg = weights.cfg
    inp = assemble_input(prompts, events, weights, instruction)
    z = transformer(inp.x, weights, prompts)
    b, s, d = z.shape
    last = ops.reshape(ops.slice(z, (slice(None), s - 1)), (b, d))
    table = ops.gather(weights["tok_emb"], np.array(cfg.verbalizer))
    return ops.matmul(last, ops.transpose(table))


def predict_batch(weights: FrozenWeights, prompts: PromptBank, events, batch_size: int = 64) -> tuple:
    """``(probs (B, C), predicted (B,))`` without recording a graph."""
    arr = events.data if isinstance(events, Tensor) else np.asarray(events, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    probs = []
    with no_grad():
        for i in range(0, arr.shape[0], batch_size):
            logits = verbalizer_logits(weights, prompts, arr[i:i + batch_size])
            probs.append(ops.softmax(logits, axis=-1).data)
    p = np.concatenate(probs)
    return p, np.argmax(p, axis=1)


def reason(weights: FrozenWeights, prompts: PromptBank, events, cfg: Optional[ReasonerConfig] = None) -> Prediction:
    """Single event sentence (M, d) -> :class:`Prediction`."""
    arr = events.embeddings.data if hasattr(events, "embeddings") else events
    probs, pred = predict_batch(weights, prompts, arr)
    if not np.all(np.isfinite(probs)):
        raise NonFiniteError("reason: non-finite class probabilities")
    return Prediction(probs[0], int(pred[0]))


# ------------------------------------------------------------------ pretraining


def proxy_grammars(cfg: ReasonerConfig, rng: np.random.Generator, num: int = 8, fanout: int = 3) -> np.ndarray:
    """``num`` sparse Markov chains over the whole vocabulary, as (num, V, V) transition tables."""
    v = cfg.vocab_size
    tables = np.zeros((num, v, v))
    for g in range(num):
        for a in range(v):
            nxt = rng.choice(v, size=fanout, replace=False)
            tables[g, a, nxt] = rng.dirichlet(np.ones(fanout))
    return tables


def sample_proxy(tables: np.ndarray, batch: int, length: int, rng: np.random.Generator) -> np.ndarray:
    num, v, _ = tables.shape
    out = np.empty((batch, length), dtype=np.int64)
    cum = np.cumsum(tables, axis=2)
    which = rng.integers(num, size=batch)
    out[:, 0] = rng.integers(v, size=batch)
    for t in range(1, length):
        u = rng.random(batch)[:, None]
        rows = cum[which, out[:, t - 1]]
        out[:, t] = np.minimum((u > rows).sum(axis=1), v - 1)
    return out


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 600
    batch: int = 32
    length: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01
    grammars: int = 8


@dataclass
class PretrainResult:
    weights: FrozenWeights
    losses: list = field(default_factory=list)
    heldout_accuracy: float = 0.0
    chance: float = 0.0
    wall_clock: float = 0.0


def _lm_loss(w: FrozenWeights, ids: np.ndarray, offset: int) -> Tensor:
    b, s = ids.shape
    x = ops.gather(w["tok_emb"], ids[:, :-1])
    pos = ops.gather(w["pos_emb"], np.arange(offset, offset + s - 1))
    x = ops.add(x, ops.broadcast_to(pos, x.shape))
    z = transformer(x, w, PromptBank.empty(w.cfg))
    logits = lm_logits(ops.reshape(z, (b * (s - 1), w.cfg.d_model)), w)
    return ops.cross_entropy(logits, ids[:, 1:].reshape(-1))


def pretrain_reasoner(cfg: ReasonerConfig, seed: int, pcfg: PretrainConfig = PretrainConfig()) -> PretrainResult:
    """Next-token training on random Markov grammars, then freeze.

    Start positions are drawn at random so every row of the position table is trained.
    """
    from vtar.pipeline.optim import AdamW, AdamWConfig

    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    tables = proxy_grammars(cfg, rng, pcfg.grammars)
    w = FrozenWeights(cfg, init_params(cfg, rng), freeze=False)
    for t in w.params.values():
        t.requires_grad = True
    opt = AdamW(w.params, AdamWConfig(lr=pcfg.lr, weight_decay=pcfg.weight_decay))
    losses = []
    span = cfg.max_positions - pcfg.length + 2
    for step in range(pcfg.steps):
        ids = sample_proxy(tables, pcfg.batch, pcfg.length, rng)
        offset = int(rng.integers(span))
        with Graph():
            loss = _lm_loss(w, ids, offset)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"pretrain_reasoner: non-finite loss at step {step}")
            opt.zero_grad()
            backward(loss)
        opt.step()
        losses.append(loss.item())

    # held-out next-token accuracy on fresh draws
    ids = sample_proxy(tables, 64, pcfg.length, rng)
    with no_grad():
        b, s = ids.shape
        x = ops.add(
            ops.gather(w["tok_emb"], ids[:, :-1]),
            ops.broadcast_to(ops.gather(w["pos_emb"], np.arange(s - 1)), (b, s - 1, cfg.d_model)),
        )
        logits = lm_logits(transformer(x, w, PromptBank.empty(cfg)), w).data
    acc = float(np.mean(np.argmax(logits, axis=-1) == ids[:, 1:]))
    frozen = FrozenWeights(cfg, {n: t.data.copy() for n, t in w.params.items()})
    return PretrainResult(frozen, losses, acc, 1.0 / cfg.vocab_size, time.perf_counter() - start)


# ------------------------------------------------------------------ adaptation


@dataclass(frozen=True)
class TuneConfig:
    steps: int = 1000
    batch: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TuneResult:
    prompts: PromptBank
    weights: FrozenWeights
    losses: list = field(default_factory=list)


def tune_prompts(
    weights: FrozenWeights,
    prompts: PromptBank,
    events: np.ndarray,
    labels: np.ndarray,
    tcfg: TuneConfig = TuneConfig(),
    seed: int = 0,
) -> TuneResult:
    """AdamW on the cross-entropy of verbalizer logits.

    Only tensors that require grad move: the prompt bank, or for a
    :meth:`FrozenWeights.trainable_copy` every weight as well. Frozen weights
    reject any gradient routed into them.
    """
    labels = np.asarray(labels, dtype=np.int64)
    events = np.asarray(events, dtype=np.float64)
    if events.shape[0] != labels.shape[0]:
        raise ShapeError("tune_prompts", events.shape, labels.shape)
    bank = prompts.clone()
    params = dict(bank.parameters())
    params.update({n: t for n, t in weights.params.items() if t.requires_grad})
    losses = []
    if tcfg.steps == 0 or not params:
        return TuneResult(bank, weights, losses)
    from vtar.pipeline.optim import AdamW, AdamWConfig

    opt = AdamW(params, AdamWConfig(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay))
    rng = np.random.default_rng(seed)
    n = events.shape[0]
    for step in range(tcfg.steps):
        idx = rng.choice(n, size=min(tcfg.batch, n), replace=False)
        with Graph():
            loss = ops.cross_entropy(verbalizer_logits(weights, bank, events[idx]), labels[idx])
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"tune_prompts: non-finite loss at step {step}")
            opt.zero_grad()
            backward(loss)
        opt.step()
        losses.append(loss.item())
    return TuneResult(bank, weights, losses)


# ------------------------------------------------------------------ checkpoints


def save_weights(weights: FrozenWeights, path, extra: Optional[dict] = None) -> str:
    meta = {"kind": "reasoner", "config": asdict(weights.cfg), "checksum": weights.checksum}
    meta.update(extra or {})
    snapshot.write_archive(path, {n: weights.params[n].data for n in sorted(weights.params)}, meta)
    return weights.checksum


def load_weights(path) -> tuple:
    from vtar.errors import FormatError

    tensors, meta = snapshot.read_archive(path)
    cfg = ReasonerConfig(**meta["config"])
    w = FrozenWeights(cfg, tensors)
    if w.checksum != meta.get("checksum"):
        raise FormatError(f"checksum mismatch: file says {meta.get('checksum')}, data gives {w.checksum}", 0)
    return w, meta


def save_prompts(prompts: PromptBank, path, extra: Optional[dict] = None) -> None:
    meta = {"kind": "prompts", "length": prompts.length, "layers": len(prompts.keys)}
    meta.update(extra or {})
    snapshot.write_archive(path, prompts.arrays(), meta)


def load_prompts(path) -> tuple:
    tensors, meta = snapshot.read_archive(path)
    layers = meta["layers"]
    keys = [Tensor(tensors[f"prompt.k{i}"], True, f"prompt.k{i}") for i in range(layers)]
    values = [Tensor(tensors[f"prompt.v{i}"], True, f"prompt.v{i}") for i in range(layers)]
    return PromptBank(keys, values), meta
