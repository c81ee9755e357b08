import json

import numpy as np
import pytest

from vtar.errors import ConfigError, FormatError, NonFiniteError, VariantMismatchError
from vtar.pipeline import config as pconfig
from vtar.pipeline import optim, report as rpt, runner
from vtar.pipeline.runner import AblationVariant
from vtar import reasoner as rsn
from vtar import vtem as vt

# ------------------------------------------------------------------ config


def test_defaults_match_the_documented_protocol():
    cfg = pconfig.RunConfig()
    assert (cfg.train.vtem_lr, cfg.train.prompt_lr) == (1e-4, 2e-3)
    assert (cfg.train.vtem_iterations, cfg.train.prompt_iterations) == (2000, 1000)
    assert (cfg.vtem.num_tokens, cfg.vtem.codebook_size, cfg.reasoner.prompt_length) == (16, 64, 16)
    assert (cfg.data.num_classes, cfg.data.num_concepts, cfg.data.samples_per_class, cfg.data.noise_sigma) == (
        8, 12, 64, 0.5)


def test_parse_overrides_and_digest_tracks_values():
    base = pconfig.RunConfig()
    cfg = pconfig.parse_config("[vtem]\nnum_tokens = 8\n[train]\nseed = 3\n")
    assert cfg.vtem.num_tokens == 8 and cfg.train.seed == 3
    assert cfg.digest != base.digest
    same = pconfig.parse_config("[vtem]\nnum_tokens = 8  # comment\n[train]\nseed=3\n")
    assert same.digest == cfg.digest


def test_dump_then_parse_round_trips():
    cfg = pconfig.parse_config("[vtem]\npooling = fixed\nhidden_dim = 64\nquantize = false\n")
    again = pconfig.parse_config(pconfig.dump_config(cfg))
    assert again == cfg and again.digest == cfg.digest


@pytest.mark.parametrize("text,needle", [
    ("[bogus]\na = 1\n", "unknown section"),
    ("[vtem]\nnope = 1\n", "unknown key"),
    ("[vtem]\nnum_tokens = many\n", "cannot parse"),
    ("[vtem]\npooling = wavy\n", "pooling"),
    ("[reasoner]\nd_model = 32\n", "disagrees"),
    ("[train]\nvtem_lr = 0\n", "vtem_lr"),
    ("not an ini", "<string>"),
])
def test_bad_config_rejected(text, needle):
    with pytest.raises(ConfigError, match=needle):
        pconfig.parse_config(text)


def test_missing_config_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        pconfig.load_config(tmp_path / "absent.ini")


# ------------------------------------------------------------------ optimizer


def test_zero_gradient_zero_decay_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = optim.adamw_step(p, {"w": np.zeros(2)}, optim.AdamWState(), optim.AdamWConfig(weight_decay=0.0))
    assert np.array_equal(new["w"], p["w"])


def test_first_step_is_unit_magnitude():
    new, st = optim.adamw_step({"p": np.array(1.0)}, {"p": np.array(1.0)}, optim.AdamWState(),
                               optim.AdamWConfig(lr=0.1, weight_decay=0.0))
    assert new["p"] == pytest.approx(0.9, abs=1e-8)
    assert st.step == 1


def test_decay_is_decoupled_from_moments():
    cfg = optim.AdamWConfig(lr=0.1, weight_decay=0.5)
    new, st = optim.adamw_step({"p": np.array(2.0)}, {"p": np.array(0.0)}, optim.AdamWState(), cfg)
    assert new["p"] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)
    assert st.m["p"] == 0.0 and st.v["p"] == 0.0


def test_non_finite_gradient_names_parameter():
    with pytest.raises(NonFiniteError, match="enc.w"):
        optim.adamw_step({"enc.w": np.ones(2)}, {"enc.w": np.array([1.0, np.inf])}, optim.AdamWState(),
                         optim.AdamWConfig())


# ------------------------------------------------------------------ reports


def test_records_round_trip_and_schema_checked(tmp_path):
    rep = rpt.RunReport("full", "abc", 0, "prompts", wall_clock=1.5)
    rep.log(step=100, loss=0.5)
    rep.summary.update(test_accuracy=0.9)
    path = tmp_path / "r.jsonl"
    rpt.write_records(path, rep.records())
    back = rpt.read_records(path)
    assert [r["kind"] for r in back] == ["interval", "summary"]
    assert rpt.strip_wall_clock(back)[-1] == {k: v for k, v in back[-1].items() if k != "wall_clock"}
    path.write_text(path.read_text() + json.dumps({"kind": "x"}) + "\n")
    with pytest.raises(FormatError, match="line 3"):
        rpt.read_records(path)


def test_non_finite_values_are_not_written():
    with pytest.raises(FormatError):
        rpt.dumps({"loss": float("nan")})


def test_join_refuses_mixed_digests(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    rpt.write_records(a, rpt.RunReport("full", "d1", 0, "p").records())
    rpt.write_records(b, rpt.RunReport("full", "d2", 0, "p").records())
    assert len(rpt.join_reports([a, a])) == 2
    with pytest.raises(ConfigError, match="digest mismatch"):
        rpt.join_reports([a, b])


def test_render_table_aligns_columns():
    text = rpt.render_table([{"name": "a", "x": 1.0}, {"name": "bbb", "x": None}])
    lines = text.splitlines()
    assert lines[0].split() == ["name", "x"]
    assert len({len(l) for l in lines[:2]}) == 1
    assert lines[3].endswith("-")


def test_figures_are_written(tmp_path):
    rpt.ablation_figure({"full": 0.9, "zero_shot": 0.1}, {"full": 0.01, "zero_shot": 0.02}, tmp_path / "a.png")
    rows = [{"axis": "M", "value": 8, "acc_mean": 0.8, "acc_sd": 0.1, "usage_mean": 0.9},
            {"axis": "M", "value": 16, "acc_mean": None, "acc_sd": None, "usage_mean": None}]
    rpt.sweep_figure(rows, tmp_path / "s.png")
    for name in ("a.png", "s.png"):
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


# ------------------------------------------------------------------ runner pieces


def test_variant_names_and_configs():
    assert [v.value for v in runner.VARIANTS] == ["full", "continuous_features", "fixed_pooling", "no_coherence",
                                                  "full_finetune", "zero_shot"]
    base = pconfig.RunConfig().vtem
    assert not runner.vtem_config_for(AblationVariant.CONTINUOUS_FEATURES, base).quantize
    assert runner.vtem_config_for(AblationVariant.FIXED_POOLING, base).pooling == "fixed"
    assert runner.vtem_config_for(AblationVariant.NO_COHERENCE, base).beta == 0
    assert runner.vtem_config_for(AblationVariant.FULL, base) == base
    with pytest.raises(ValueError, match="unknown"):
        AblationVariant.parse("half")


def test_variant_state_mismatch_rejected():
    cfg = pconfig.RunConfig()
    v = vt.Vtem(cfg.vtem, 0)
    with pytest.raises(VariantMismatchError):
        runner.check_variant_state(AblationVariant.ZERO_SHOT, v, rsn.PromptBank.init(cfg.reasoner, 0))
    with pytest.raises(VariantMismatchError):
        runner.check_variant_state(AblationVariant.CONTINUOUS_FEATURES, v, None)
    runner.check_variant_state(AblationVariant.FULL, v, None)


def test_smoothing_window():
    out = runner.smoothed(np.arange(10.0), window=4)
    # trailing windows that lie fully inside the series
    assert out.size == 7
    assert out[0] == pytest.approx(1.5) and out[-1] == pytest.approx(7.5)
    assert runner.smoothed([3.0, 5.0], window=100).tolist() == [4.0]


TINY_INI = """
[data]
samples_per_class = 8
frames = 96
num_classes = 3
[vtem]
num_tokens = 4
codebook_size = 8
[reasoner]
num_classes = 3
layers = 1
[train]
vtem_iterations = 6
prompt_iterations = 4
pretrain_steps = 4
log_interval = 2
"""


@pytest.fixture(scope="module")
def tiny_cfg():
    return pconfig.parse_config(TINY_INI)


def test_zero_shot_reports_no_trainable_params(tiny_cfg):
    run = runner.run_variant(tiny_cfg, AblationVariant.ZERO_SHOT, 0)
    s = run.summary()
    assert s["trainable_params"] == 0 and s["variant"] == "zero_shot"
    assert s["prob_sum_max_dev"] < 1e-9 and s["prob_min"] >= 0


def test_continuous_variant_never_quantizes(tiny_cfg):
    run = runner.run_variant(tiny_cfg, AblationVariant.CONTINUOUS_FEATURES, 0)
    assert run.summary()["quantize_calls"] == 0 and run.summary()["codebook_usage"] is None


def test_sweep_records_invalid_cells_and_continues(tiny_cfg):
    cells = runner.sweep("M", [2, 500], tiny_cfg, seeds=[0])
    assert cells[0].ok and not cells[1].ok and "exceeds" in cells[1].error
    rows = runner.sweep_table(cells)
    assert [(r["value"], r["runs"], r["failed"]) for r in rows] == [(2, 1, 0), (500, 0, 1)]
    assert rows[0]["usage_mean"] is not None


def test_sweep_table_shape_for_four_values_three_seeds():
    cells = [runner.SweepCell("K", k, s, 0.5 + s / 10, 0.75) for k in (16, 32, 64, 128) for s in range(3)]
    assert len(cells) == 12
    rows = runner.sweep_table(cells)
    assert [r["value"] for r in rows] == [16, 32, 64, 128]
    assert all(r["acc_mean"] == pytest.approx(0.6) and r["acc_sd"] == pytest.approx(0.1) for r in rows)
    assert all(r["usage_mean"] == 0.75 for r in rows)


def test_unknown_sweep_axis_rejected(tiny_cfg):
    with pytest.raises(ValueError):
        runner.sweep("Q", [1], tiny_cfg, [0])


def test_suite_names_the_crashing_variant(tiny_cfg, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(runner, "run_prompt_phase", boom)
    with pytest.raises(RuntimeError, match="variant full .*kaput"):
        runner.ablation_suite(tiny_cfg, [0], [AblationVariant.FULL])
