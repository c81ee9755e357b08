import json

import numpy as np
import pytest

from vtar import cli, synthgen

TINY = """
[data]
samples_per_class = 8
frames = 96
num_classes = 3
[vtem]
num_tokens = {m}
codebook_size = 8
[reasoner]
num_classes = 3
layers = 1
[train]
vtem_iterations = 6
prompt_iterations = 4
pretrain_steps = 150
log_interval = 2
{extra}
"""


def write_cfg(tmp_path, name="c.ini", m=4, extra=""):
    p = tmp_path / name
    p.write_text(TINY.format(m=m, extra=extra))
    return str(p)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    line = err.strip().splitlines()[-1]
    return json.loads(line)


def test_unknown_command_is_usage_error(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and error_of(err)["exit_code"] == 2


def test_sweep_without_axis_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "sweep", "--values", "8", "--out", str(tmp_path))
    assert code == 2 and "axis" in error_of(err)["message"]


def test_bad_config_is_exit_3(capsys, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[vtem]\nnum_tokens = lots\n")
    code, _, err = run(capsys, "gen-data", "--config", str(bad), "--out", str(tmp_path))
    assert code == 3 and error_of(err)["error"] == "ConfigError"


def test_missing_inputs_are_exit_3_with_hint(capsys, tmp_path):
    code, _, err = run(capsys, "train-vtem", "--out", str(tmp_path / "empty"))
    assert code == 3 and "gen-data" in error_of(err)["message"]


def test_gen_data_twice_is_byte_identical(capsys, tmp_path):
    cfg = write_cfg(tmp_path)
    for d in ("a", "b"):
        assert run(capsys, "gen-data", "--config", cfg, "--seed", "1", "--out", str(tmp_path / d))[0] == 0
    for f in ("train.vtar", "test.vtar", "data.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_output_dir_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "envout"))
    assert run(capsys, "gen-data", "--config", write_cfg(tmp_path))[0] == 0
    assert (tmp_path / "envout" / "train.vtar").is_file()
    assert run(capsys, "gen-data", "--config", write_cfg(tmp_path), "--out", str(tmp_path / "flag"))[0] == 0
    assert (tmp_path / "flag" / "train.vtar").is_file()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = write_cfg(tmp, m=16)
    out = str(tmp / "out")
    codes = {}
    for cmd in ("gen-data", "train-vtem", "tokenize", "pretrain-reasoner", "tune-prompts", "eval"):
        codes[cmd] = cli.main([cmd, "--config", cfg, "--out", out])
    return tmp, cfg, out, codes


def test_pipeline_composes_from_one_config(pipeline):
    tmp, _, out, codes = pipeline
    assert set(codes.values()) == {0}, codes
    preds = [json.loads(l) for l in (tmp / "out" / "predictions.jsonl").read_text().splitlines()]
    assert len(preds) == 6
    for p in preds:
        probs = np.array(p["probs"])
        assert np.all(probs >= 0) and abs(probs.sum() - 1) < 1e-9
        assert p["predicted"] == int(np.argmax(probs))


def test_every_artifact_embeds_the_digest(pipeline):
    tmp, cfg, _, _ = pipeline
    from vtar.pipeline.config import load_config

    digest = load_config(cfg).digest
    out = tmp / "out"
    for name in ("data.json", "events_train.json"):
        assert json.loads((out / name).read_text())["digest"] == digest
    for name in ("vtem_report.jsonl", "prompts_report.jsonl", "eval_report.jsonl", "predictions.jsonl"):
        assert all(json.loads(l)["digest"] == digest for l in (out / name).read_text().splitlines())


def test_tokenize_single_sample(capsys, pipeline):
    tmp, cfg, out, _ = pipeline
    train = synthgen.read_dataset(tmp / "out" / "train.vtar")
    one = tmp / "one.vtar"
    synthgen.write_dataset(train[:1], one)
    code, _, _ = run(capsys, "tokenize", "--config", cfg, "--out", out, "--dataset", str(one))
    assert code == 0
    lines = (tmp / "out" / "events_one.txt").read_text().splitlines()
    assert len(lines) == 1
    ids = [int(t) for t in lines[0].split(":", 1)[1].split()]
    assert len(ids) == 16 and all(0 <= t < 8 for t in ids)


def test_artifacts_from_another_config_are_refused(capsys, pipeline, tmp_path):
    _, _, out, _ = pipeline
    other = write_cfg(tmp_path, m=16, extra="seed = 9")
    code, _, err = run(capsys, "eval", "--config", other, "--out", out)
    assert code == 3 and "digest mismatch" in error_of(err)["message"]


def test_report_refuses_mixed_digests(capsys, pipeline, tmp_path):
    tmp, _, _, _ = pipeline
    good = tmp / "out" / "eval_report.jsonl"
    code, out, _ = run(capsys, "report", str(good), str(good))
    assert code == 0 and "accuracy" in out
    foreign = tmp_path / "foreign.jsonl"
    rec = json.loads(good.read_text().splitlines()[0])
    rec["digest"] = "0" * 16
    foreign.write_text(json.dumps(rec) + "\n")
    code, _, err = run(capsys, "report", str(good), str(foreign))
    assert code == 3 and "digest mismatch" in error_of(err)["message"]


def test_non_finite_training_exits_4(capsys, tmp_path):
    cfg = write_cfg(tmp_path, extra="vtem_lr = 1e300")
    out = str(tmp_path / "o")
    assert run(capsys, "gen-data", "--config", cfg, "--out", out)[0] == 0
    code, _, err = run(capsys, "train-vtem", "--config", cfg, "--out", out)
    assert code == 4 and error_of(err)["error"] == "NonFiniteError"


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--points", "1")
    assert code == 0
    for name in ("extractor", "pooler", "decoder", "codebook_ste", "coherence", "reasoner_prompts"):
        assert name in out


def test_read_only_commands_create_no_output_dir(capsys, tmp_path):
    out = tmp_path / "untouched"
    assert run(capsys, "gradcheck", "--points", "1", "--out", str(out))[0] == 0
    assert not out.exists()
