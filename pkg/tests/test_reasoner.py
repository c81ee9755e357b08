import numpy as np
import pytest
from scipy.linalg import hadamard

from vtar import reasoner as rsn
from vtar.errors import FormatError, FrozenTensorError
from vtar.numerics import Graph, Tensor, backward, ops
from vtar.reasoner import PromptBank, ReasonerConfig

TINY = ReasonerConfig(layers=2, heads=2, d_model=8, d_ff=16, vocab_size=16, num_classes=3, instruction_length=2,
                      prompt_length=3, max_positions=24)


def weights(cfg=TINY, seed=0):
    return rsn.FrozenWeights(cfg, rsn.init_params(cfg, np.random.default_rng(seed)))


def events(b=4, m=5, d=8, seed=1):
    return np.random.default_rng(seed).normal(size=(b, m, d))


# ------------------------------------------------------------------ layout


def test_reserved_ids_do_not_overlap():
    cfg = ReasonerConfig()
    assert cfg.instruction_tokens == tuple(range(8))
    assert cfg.verbalizer == tuple(range(8, 16))
    assert cfg.answer_token == 16


def test_attendable_length_with_default_sizes():
    cfg = ReasonerConfig(layers=1)
    w = weights(cfg)
    bank = PromptBank.init(cfg, 0)
    inp = rsn.assemble_input(bank, events(1, 16, 64), w)
    assert inp.x.shape[1] == 16 + 8 + 1
    assert inp.positions.tolist() == list(range(16, 41))
    _, attns = rsn.transformer(inp.x, w, bank, keep_attention=True)
    assert attns[0].shape == (1, cfg.heads, 25, 41)
    assert cfg.max_sequence(16) == 41


def test_prompts_are_visible_to_every_query_and_events_causal():
    w = weights()
    bank = PromptBank.init(TINY, 0)
    inp = rsn.assemble_input(bank, events(1), w)
    _, attns = rsn.transformer(inp.x, w, bank, keep_attention=True)
    a = attns[0][0, 0]
    lp = bank.length
    assert np.all(a[:, :lp] > 0)
    assert np.all(a[:, lp:][np.triu_indices(a.shape[0], 1)] == 0)
    assert np.max(np.abs(a.sum(-1) - 1)) < 1e-9


def test_overflow_names_the_lengths():
    w = weights()
    with pytest.raises(ValueError, match=r"3 prompts \+ 19 events .* = 25 > 24"):
        rsn.assemble_input(PromptBank.init(TINY, 0), events(1, 19), w)


def _reference_transformer(w, x):
    """Plain numpy pre-LN causal transformer without prefixes."""
    cfg = w.cfg

    def ln(v):
        mu = v.mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(((v - mu) ** 2).mean(-1, keepdims=True) + 1e-5)

    def gelu(v):
        return 0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v ** 3)))

    p = {n: t.data for n, t in w.params.items()}
    b, s, d = x.shape
    h, dh = cfg.heads, cfg.d_head
    for i in range(cfg.layers):
        z = ln(x)
        q, k, v = (np.einsum("bsd,de->bse", z, p[f"layer{i}.{n}"]).reshape(b, s, h, dh) for n in ("wq", "wk", "wv"))
        sc = np.einsum("bqhd,bkhd->bhqk", q, k) / np.sqrt(dh)
        sc = sc + np.triu(np.full((s, s), -np.inf), 1)
        a = np.exp(sc - sc.max(-1, keepdims=True))
        a = a / a.sum(-1, keepdims=True)
        ctx = np.einsum("bhqk,bkhd->bqhd", a, v).reshape(b, s, d)
        x = x + ctx @ p[f"layer{i}.wo"]
        z = ln(x)
        x = x + gelu(z @ p[f"layer{i}.w1"] + p[f"layer{i}.b1"]) @ p[f"layer{i}.w2"] + p[f"layer{i}.b2"]
    return ln(x)


def test_empty_bank_equals_plain_transformer():
    w = weights()
    ev = events()
    for bank in (PromptBank.empty(TINY), PromptBank.init(TINY, 0, length=0)):
        inp = rsn.assemble_input(bank, ev, w)
        assert inp.positions[0] == 0
        got = rsn.transformer(inp.x, w, bank).data
        assert np.allclose(got, _reference_transformer(w, inp.x.data), rtol=0, atol=1e-12)


def test_empty_bank_is_bit_exact_across_constructors():
    w = weights()
    ev = events()
    a = rsn.predict_batch(w, PromptBank.empty(TINY), ev)[0]
    b = rsn.predict_batch(w, PromptBank.init(TINY, 5, length=0), ev)[0]
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------------ prediction


def test_prediction_is_deterministic_and_simplex():
    w = weights()
    bank = PromptBank.init(TINY, 0)
    p1 = rsn.reason(w, bank, events(1)[0])
    p2 = rsn.reason(w, bank, events(1)[0])
    assert p1.class_probs.tobytes() == p2.class_probs.tobytes() and p1.predicted == p2.predicted
    assert np.all(p1.class_probs >= 0) and abs(p1.class_probs.sum() - 1) < 1e-9
    assert p1.class_probs.shape == (3,)


def test_prediction_rejects_non_simplex():
    with pytest.raises(ValueError):
        rsn.Prediction(np.array([0.5, 0.6]), 1)


def test_copy_pathway_makes_chosen_class_win():
    """One layer, zero query/key weights, identity value/output: the answer slot
    receives the normalised event, which equals a verbalizer embedding."""
    cfg = ReasonerConfig(layers=1, heads=1, d_model=8, d_ff=4, vocab_size=16, num_classes=3, instruction_length=2,
                         prompt_length=0, max_positions=8)
    p = {n: np.zeros_like(a) for n, a in rsn.init_params(cfg, np.random.default_rng(0)).items()}
    h = hadamard(8).astype(float)
    for c, tok in enumerate(cfg.verbalizer):
        p["tok_emb"][tok] = h[c + 1]  # zero-mean, mutually orthogonal
    p["layer0.wv"] = np.eye(8)
    p["layer0.wo"] = np.eye(8)
    w = rsn.FrozenWeights(cfg, p)
    bank = PromptBank.empty(cfg)
    for c in range(3):
        pred = rsn.reason(w, bank, h[c + 1][None])
        assert pred.predicted == c
        assert pred.class_probs[c] > 0.99


# ------------------------------------------------------------------ accounting


def test_default_counts():
    cfg = ReasonerConfig()
    w = weights(cfg)
    total, trainable, ratio = rsn.count_params(w, PromptBank.init(cfg, 0))
    assert trainable == 4 * 2 * 16 * 64 == 8192
    assert ratio < 0.05
    assert rsn.count_params(w, PromptBank.empty(cfg))[1] == 0
    t_full, tr_full, r_full = rsn.count_params(w, PromptBank.empty(cfg), full_finetune=True)
    assert tr_full == t_full and r_full == 1.0


# ------------------------------------------------------------------ freezing


def test_frozen_weights_reject_requires_grad():
    w = weights()
    assert w.frozen
    with pytest.raises(FrozenTensorError):
        w["layer0.wq"].requires_grad = True


def test_gradient_reaching_frozen_weight_is_hard_failure():
    w = weights()
    w["layer0.wq"]._requires_grad = True  # simulate a bug that bypasses the guard
    bank = PromptBank.init(TINY, 0)
    with Graph():
        loss = ops.cross_entropy(rsn.verbalizer_logits(w, bank, events()), np.array([0, 1, 2, 0]))
        with pytest.raises(FrozenTensorError, match="layer0.wq"):
            backward(loss)


def test_zero_steps_leave_bank_bit_identical():
    w = weights()
    bank = PromptBank.init(TINY, 3)
    res = rsn.tune_prompts(w, bank, events(), np.array([0, 1, 2, 0]), rsn.TuneConfig(steps=0))
    for n, a in bank.arrays().items():
        assert res.prompts.arrays()[n].tobytes() == a.tobytes()


def test_tuning_moves_only_prompts_and_lowers_loss():
    w = weights()
    before = w.checksum
    bank = PromptBank.init(TINY, 3)
    ev, y = events(8, seed=4), np.array([0, 1, 2, 0, 1, 2, 0, 1])
    res = rsn.tune_prompts(w, bank, ev, y, rsn.TuneConfig(steps=60, batch=8, lr=1e-2))
    assert w.checksum == before
    assert res.losses[-1] < res.losses[0]
    assert any(not np.array_equal(a, res.prompts.arrays()[n]) for n, a in bank.arrays().items())
    # the caller's bank is untouched
    assert all(np.array_equal(a, b) for a, b in zip(bank.arrays().values(), PromptBank.init(TINY, 3).arrays().values()))


def test_full_finetune_copy_moves_weights_but_not_the_original():
    w = weights()
    before = w.checksum
    copy = w.trainable_copy()
    res = rsn.tune_prompts(copy, PromptBank.empty(TINY), events(), np.array([0, 1, 2, 0]),
                           rsn.TuneConfig(steps=3, batch=4))
    assert w.checksum == before and res.weights.checksum != before
    total, trainable, ratio = rsn.count_params(copy, PromptBank.empty(TINY))
    assert trainable == total and ratio == 1.0


# ------------------------------------------------------------------ pretraining and checkpoints


def test_pretraining_is_deterministic_and_frozen():
    pc = rsn.PretrainConfig(steps=5, batch=4, length=8)
    a = rsn.pretrain_reasoner(TINY, 11, pc)
    b = rsn.pretrain_reasoner(TINY, 11, pc)
    assert a.weights.checksum == b.weights.checksum
    assert a.weights.frozen
    assert a.chance == 1 / 16


def test_weights_and_prompts_round_trip(tmp_path):
    w = weights()
    rsn.save_weights(w, tmp_path / "w.ckpt", {"digest": "x"})
    back, meta = rsn.load_weights(tmp_path / "w.ckpt")
    assert back.checksum == w.checksum and back.frozen and meta["digest"] == "x"
    bank = PromptBank.init(TINY, 2)
    rsn.save_prompts(bank, tmp_path / "p.ckpt")
    got, _ = rsn.load_prompts(tmp_path / "p.ckpt")
    assert all(np.array_equal(a, got.arrays()[n]) for n, a in bank.arrays().items())


def test_corrupted_weights_rejected(tmp_path):
    w = weights()
    path = tmp_path / "w.ckpt"
    rsn.save_weights(w, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x10
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        rsn.load_weights(path)
