"""Finite-difference checks for every trainable component, at tiny sizes.

Each component builds fresh random parameters and inputs from a seed and
returns the max relative error of :func:`grad_check` over all coordinates.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from vtar import reasoner as rsn
from vtar import vtem as vt
from vtar.numerics import Tensor, grad_check, no_grad, ops

TINY_VTEM = vt.VtemConfig(
    feature_dim=3, hidden_dim=4, window=2, stride=1, d_model=4, num_tokens=3,
    codebook_size=5, decoder_hidden=8, pos_scale=1.0,
)
TINY_REASONER = rsn.ReasonerConfig(
    layers=2, heads=2, d_model=8, d_ff=16, vocab_size=16, num_classes=3,
    instruction_length=2, prompt_length=2, max_positions=16,
)
FRAMES = 7
BATCH = 2


def _tiny_vtem(seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    v = vt.Vtem(TINY_VTEM, seed)
    # move off the identity init so every decoder block carries signal
    for t in v.decoder.parameters().values():
        t.data = t.data + rng.normal(0, 0.3, t.shape)
    frames = rng.normal(0, 1, (BATCH, FRAMES, TINY_VTEM.feature_dim))
    with_codes = rng.normal(0, 1, (TINY_VTEM.codebook_size, TINY_VTEM.d_model))
    v.codebook = vt.Codebook(Tensor(with_codes, True, "codebook.entries"))
    return v, frames


def check_extractor(seed: int) -> float:
    v, frames = _tiny_vtem(seed)
    x = Tensor(frames)
    params = list(v.extractor.parameters().values())
    return grad_check(lambda: ops.mean(ops.mul(v.extractor(x), v.extractor(x))), params)


def check_pooler(seed: int) -> float:
    v, frames = _tiny_vtem(seed)
    rng = np.random.default_rng(seed + 1)
    h = Tensor(rng.normal(0, 1, (BATCH, 5, TINY_VTEM.hidden_dim)))
    w = Tensor(rng.normal(0, 1, (BATCH, TINY_VTEM.num_tokens, TINY_VTEM.d_model)))

    def f():
        pooled = vt.adaptive_pool(h, v.pooler).pooled
        return ops.mean(ops.mul(pooled, w))

    return grad_check(f, list(v.pooler.parameters().values()) + [h])


def check_decoder(seed: int) -> float:
    v, _ = _tiny_vtem(seed)
    rng = np.random.default_rng(seed + 2)
    p = Tensor(rng.normal(0, 1, (BATCH, TINY_VTEM.num_tokens, TINY_VTEM.d_model)))
    e = Tensor(rng.normal(0, 1, p.shape))
    return grad_check(lambda: vt.recon_loss(p, e, v.decoder), list(v.decoder.parameters().values()) + [e])


def check_coherence(seed: int) -> float:
    rng = np.random.default_rng(seed + 3)
    e = Tensor(rng.normal(0, 1, (3, 4, 5)))
    return grad_check(lambda t: vt.coherence_loss(t, 0.5), e)


def check_vtem_ste(seed: int) -> float:
    """Full objective w.r.t. every mapper parameter against the straight-through surrogate.

    The surrogate freezes token ids and the offset ``c0 - p0`` at the base
    point: event embeddings become ``p(theta) + (c0 - p0)``, the encoder
    commitment uses the frozen ``c0`` and the codebook term the frozen ``p0``.
    """
    v, frames = _tiny_vtem(seed)
    cfg = TINY_VTEM
    params = list(v.parameters().values())

    def objective():
        pooled, sent = v.tokenize(frames, track_usage=False)
        return vt.vtem_loss(pooled, sent, v.decoder, 1.0, 0.7, 0.25, 0.5).objective

    with no_grad():
        p0 = v.pool(frames).pooled.data.copy()
    ids = vt.nearest_codes(p0.reshape(-1, cfg.d_model), v.codebook.entries.data).reshape(p0.shape[:-1])
    c0 = v.codebook.entries.data[ids].copy()

    def surrogate():
        pooled = v.pool(frames).pooled
        e = ops.add(pooled, ops.constant(c0 - p0))
        rec = vt.recon_loss(pooled, e, v.decoder)
        cont = vt.coherence_loss(e, 0.5)
        d_enc = ops.sub(pooled, ops.constant(c0))
        enc = ops.mean(ops.sum(ops.mul(d_enc, d_enc), axis=-1))
        d_cb = ops.sub(ops.constant(p0), ops.gather(v.codebook.entries, ids))
        cbk = ops.mean(ops.sum(ops.mul(d_cb, d_cb), axis=-1))
        total = ops.add(ops.add(rec, ops.mul(cont, 0.7)), ops.mul(enc, 0.25))
        return ops.add(total, cbk)

    return grad_check(objective, params, reference=surrogate)


def check_reasoner(seed: int) -> float:
    rng = np.random.default_rng(seed + 4)
    cfg = TINY_REASONER
    w = rsn.FrozenWeights(cfg, rsn.init_params(cfg, rng), freeze=False)
    bank = rsn.PromptBank.init(cfg, seed)
    events = rng.normal(0, 1, (2, 3, cfg.d_model))
    labels = np.array([0, 2])
    params = list(bank.parameters().values()) + [w["tok_emb"], w["layer0.wq"]]
    return grad_check(lambda: ops.cross_entropy(rsn.verbalizer_logits(w, bank, events), labels), params)


COMPONENTS: dict = {
    "extractor": check_extractor,
    "pooler": check_pooler,
    "decoder": check_decoder,
    "codebook_ste": check_vtem_ste,
    "coherence": check_coherence,
    "reasoner_prompts": check_reasoner,
}


def run_suite(points: int = 10, seed: int = 0, components: dict = None,
              progress: Callable[[str, float], None] = None) -> dict:
    """``{component: max error over points}`` plus total seconds under ``"_seconds"``."""
    start = time.perf_counter()
    out = {}
    for name, fn in (components or COMPONENTS).items():
        worst = float(max(fn(seed * 1000 + k) for k in range(points)))
        out[name] = worst
        if progress:
            progress(name, worst)
    out["_seconds"] = time.perf_counter() - start
    return out
