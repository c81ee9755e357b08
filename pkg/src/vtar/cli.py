"""``vtar`` command line.

Every command takes ``--config``, ``--seed`` and ``--out``; the output
directory defaults to ``$VTAR_OUT`` and then ``./vtar_out``. Failures print
one JSON line on stderr and exit with 2 (usage), 3 (config or input),
4 (numerical) or 5 (acceptance gate).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from vtar import reasoner as rsn
from vtar import synthgen
from vtar import vtem as vt
from vtar.errors import ConfigError, FormatError, GateFailure, UsageError, VtarError
from vtar.pipeline import config as pconfig
from vtar.pipeline import report as rpt
from vtar.pipeline import runner

ENV_OUT = "VTAR_OUT"
GRAD_TOLERANCE = 1e-5


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit 2 itself
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [data] [vtem] [reasoner] [train] sections")
    p.add_argument("--seed", type=int, default=None, help="overrides [train] seed")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./vtar_out)")


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vtar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write train.vtar and test.vtar")
    _common(p)

    p = sub.add_parser("train-vtem", help="train the video-to-event mapper")
    _common(p)
    p.add_argument("--variant", default="full", help="ablation variant (default full)")

    p = sub.add_parser("tokenize", help="export event sentences as text lines")
    _common(p)
    p.add_argument("--dataset", help="dataset file (default <out>/train.vtar)")
    p.add_argument("--vtem", help="mapper checkpoint (default <out>/vtem.ckpt)")

    p = sub.add_parser("pretrain-reasoner", help="pretrain and freeze the reasoner")
    _common(p)

    p = sub.add_parser("tune-prompts", help="adapt the prompt bank (or the variant's equivalent)")
    _common(p)
    p.add_argument("--variant", default="full", help="ablation variant (default full)")

    p = sub.add_parser("eval", help="predict the test split")
    _common(p)
    p.add_argument("--dataset", help="dataset file (default <out>/test.vtar)")

    p = sub.add_parser("ablate", help="run every variant on several seeds")
    _common(p)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--variants", default=",".join(v.value for v in runner.VARIANTS),
                   help="comma-separated variants (default all six)")
    p.add_argument("--figures", action="store_true", help="also write PNG figures")

    p = sub.add_parser("sweep", help="sweep token count M or codebook size K")
    _common(p)
    p.add_argument("--axis", required=True, choices=sorted(runner.SWEEP_AXES),
                   help="M (event tokens) or K (codebook size)")
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--figures", action="store_true", help="also write a PNG figure")

    p = sub.add_parser("gradcheck", help="finite-difference check of every component")
    _common(p)
    p.add_argument("--points", type=int, default=10, help="random points per component")

    p = sub.add_parser("report", help="render line-delimited reports as a table")
    p.add_argument("paths", nargs="+", help="line-delimited report files")
    p.add_argument("--kind", choices=("summary", "interval", "all"), default="summary",
                   help="which records to show")
    return parser


# ------------------------------------------------------------------ helpers


READ_ONLY = ("gradcheck", "report")  # commands that never write to the output directory


class Context:
    def __init__(self, args):
        self.args = args
        self.cfg = pconfig.load_config(args.config)
        if args.seed is not None:
            self.cfg = self.cfg.replace("train", seed=args.seed)
        self.seed = self.cfg.train.seed
        out = args.out or os.environ.get(ENV_OUT) or "vtar_out"
        self.out = Path(out)
        if args.command in READ_ONLY:
            return
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.out}: {exc.strerror}") from None

    @property
    def digest(self) -> str:
        return self.cfg.digest

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str, override: Optional[str] = None, hint: str = "") -> Path:
        p = Path(override) if override else self.path(name)
        if not p.is_file():
            raise ConfigError(f"missing input {p}" + (f" (run `vtar {hint}` first)" if hint else ""))
        return p

    def check_digest(self, meta: dict, what: Path) -> None:
        if meta.get("digest") != self.digest:
            raise ConfigError(f"digest mismatch: {what} has {meta.get('digest')}, config has {self.digest}")

    def write_meta(self, name: str, **fields) -> None:
        payload = {"schema": rpt.SCHEMA, "digest": self.digest, "seed": self.seed, **fields}
        self.path(name).write_text(json.dumps(payload, sort_keys=True) + "\n")

    def read_meta(self, name: str, hint: str = "gen-data") -> dict:
        p = self.need(name, hint=hint)
        meta = json.loads(p.read_text())
        self.check_digest(meta, p)
        return meta

    def datasets(self) -> tuple:
        self.read_meta("data.json")
        train = synthgen.read_dataset(self.need("train.vtar", hint="gen-data"))
        test = synthgen.read_dataset(self.need("test.vtar", hint="gen-data"))
        return train, test

    def load_vtem(self, path: Optional[str] = None) -> vt.Vtem:
        p = self.need("vtem.ckpt", path, "train-vtem")
        vtem, meta = vt.load_vtem(p)
        self.check_digest(meta, p)
        return vtem

    def load_reasoner(self) -> rsn.FrozenWeights:
        p = self.need("reasoner.ckpt", hint="pretrain-reasoner")
        weights, meta = rsn.load_weights(p)
        self.check_digest(meta, p)
        return weights


def _say(msg: str) -> None:
    print(msg, flush=True)


# ------------------------------------------------------------------ commands


def cmd_gen_data(ctx: Context) -> int:
    train, test = runner.dataset_for(ctx.cfg, ctx.seed)
    synthgen.write_dataset(train, ctx.path("train.vtar"))
    synthgen.write_dataset(test, ctx.path("test.vtar"))
    centroid = synthgen.centroid_accuracy(train, test)
    ctx.write_meta("data.json", train=len(train), test=len(test), centroid_accuracy=centroid)
    _say(f"wrote {len(train)} train and {len(test)} test samples to {ctx.out}")
    return 0


def cmd_train_vtem(ctx: Context) -> int:
    variant = runner.AblationVariant.parse(ctx.args.variant)
    train, _ = ctx.datasets()
    vcfg = runner.vtem_config_for(variant, ctx.cfg.vtem)
    vtem, report = runner.run_vtem_phase(train, ctx.cfg, ctx.seed, vcfg, variant)
    checksum = vt.save_vtem(vtem, ctx.path("vtem.ckpt"), {"digest": ctx.digest, "variant": variant.value,
                                                         "seed": ctx.seed})
    rpt.write_records(ctx.path("vtem_report.jsonl"), report.records())
    s = report.summary
    _say(f"vtem checksum {checksum}; smoothed loss {s['loss_start']:.4f} -> {s['loss_end']:.4f}; "
         f"codebook usage {s['codebook_usage']}")
    return 0


def cmd_tokenize(ctx: Context) -> int:
    vtem = ctx.load_vtem(ctx.args.vtem)
    if not vtem.cfg.quantize:
        raise ConfigError("mapper was trained without quantization, so it has no tokens to export")
    path = ctx.need("train.vtar", ctx.args.dataset, "gen-data")
    samples = synthgen.read_dataset(path)
    stem = path.stem
    lines = []
    if samples:
        _, ids = vtem.event_embeddings(vt.stack_frames(samples))
        lines = [f"{stem}-{i:05d}: " + " ".join(str(int(t)) for t in row) for i, row in enumerate(ids)]
    target = ctx.path(f"events_{stem}.txt")
    target.write_text("".join(line + "\n" for line in lines))
    ctx.write_meta(f"events_{stem}.json", samples=len(lines), tokens=vtem.cfg.num_tokens)
    _say(f"wrote {len(lines)} event sentences to {target}")
    return 0


def cmd_pretrain(ctx: Context) -> int:
    res = runner.pretrained_reasoner(ctx.cfg)
    checksum = rsn.save_weights(res.weights, ctx.path("reasoner.ckpt"), {
        "digest": ctx.digest,
        "heldout_accuracy": res.heldout_accuracy,
        "chance": res.chance,
    })
    ctx.path("reasoner.checksum").write_text(checksum + "\n")
    ratio = res.heldout_accuracy / res.chance
    _say(f"reasoner checksum {checksum}; proxy next-token accuracy {res.heldout_accuracy:.4f} "
         f"({ratio:.1f}x chance)")
    if ratio <= 5:
        raise GateFailure(f"pretrained reasoner is degenerate: {ratio:.2f}x chance <= 5x")
    return 0


def cmd_tune(ctx: Context) -> int:
    variant = runner.AblationVariant.parse(ctx.args.variant)
    train, test = ctx.datasets()
    vtem = ctx.load_vtem()
    weights = ctx.load_reasoner()
    res = runner.run_prompt_phase(vtem, weights, train, test, ctx.cfg, variant, ctx.seed)
    extra = {"digest": ctx.digest, "variant": variant.value, "seed": ctx.seed}
    rsn.save_prompts(res.prompts, ctx.path("prompts.ckpt"), extra)
    if variant is runner.AblationVariant.FULL_FINETUNE:
        rsn.save_weights(res.weights, ctx.path("reasoner_finetuned.ckpt"), extra)
    rpt.write_records(ctx.path("prompts_report.jsonl"), res.report.records())
    s = res.report.summary
    _say(f"{variant.value}: trainable {s['trainable_params']} of {s['total_params']} "
         f"({100 * s['trainable_ratio']:.3f}%), train accuracy {s['train_accuracy']:.4f}")
    return 0


def cmd_eval(ctx: Context) -> int:
    ctx.read_meta("data.json")
    path = ctx.need("test.vtar", ctx.args.dataset, "gen-data")
    samples = synthgen.read_dataset(path)
    if not samples:
        raise ConfigError(f"{path} holds no samples")
    vtem = ctx.load_vtem()
    prompts, pmeta = rsn.load_prompts(ctx.need("prompts.ckpt", hint="tune-prompts"))
    ctx.check_digest(pmeta, ctx.path("prompts.ckpt"))
    if pmeta.get("variant") == runner.AblationVariant.FULL_FINETUNE.value:
        weights, meta = rsn.load_weights(ctx.need("reasoner_finetuned.ckpt"))
        ctx.check_digest(meta, ctx.path("reasoner_finetuned.ckpt"))
    else:
        weights = ctx.load_reasoner()
    x, _ = vtem.reasoner_inputs(vt.stack_frames(samples))
    probs, pred = rsn.predict_batch(weights, prompts, x)
    labels = np.array([s.label for s in samples])
    acc = float(np.mean(pred == labels))
    records = []
    for i, (p, k, y) in enumerate(zip(probs, pred, labels)):
        records.append({"schema": rpt.SCHEMA, "digest": ctx.digest, "kind": "prediction",
                        "sample_id": f"{path.stem}-{i:05d}", "predicted": int(k), "label": int(y),
                        "probs": [float(v) for v in p]})
    rpt.write_records(ctx.path("predictions.jsonl"), records)
    rpt.write_records(ctx.path("eval_report.jsonl"), [{
        "schema": rpt.SCHEMA, "digest": ctx.digest, "kind": "summary", "phase": "eval",
        "variant": pmeta.get("variant"), "seed": ctx.seed, "samples": len(samples), "accuracy": acc,
        "prob_sum_max_dev": float(np.abs(probs.sum(1) - 1).max()), "prob_min": float(probs.min()),
    }])
    _say(f"accuracy {acc:.4f} on {len(samples)} samples")
    return 0


def _ablation_rows(result: runner.AblationResult) -> list:
    rows = []
    for v in runner.VARIANTS:
        acc = result.accuracy(v)
        if acc.size:
            rows.append({"variant": v.value, "label": runner.VARIANT_LABELS[v], "seeds": int(acc.size),
                         "acc_mean": float(acc.mean()), "acc_sd": float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
                         "acc_min": float(acc.min())})
    return rows


def cmd_ablate(ctx: Context) -> int:
    seeds = _int_list(ctx.args.seeds)
    variants = [runner.AblationVariant.parse(v) for v in ctx.args.variants.split(",") if v]
    if len(seeds) < 5:
        _say(f"note: {len(seeds)} seeds; comparative claims want at least 5")
    log = ctx.path("ablation.jsonl")
    log.write_text("")

    def progress(run):
        rpt.append_records(log, run.vtem_report.records() + run.prompt.report.records())
        _say(f"seed {run.seed} {run.variant.value:<20} test accuracy {run.test_accuracy:.4f}")

    result = runner.ablation_suite(ctx.cfg, seeds, variants, progress=progress, enforce_gate=False)
    rows = _ablation_rows(result)
    per_run = [r.summary() for r in result.runs]
    text = ["# held-out accuracy per variant", rpt.render_table(rows),
            "# per run", rpt.render_table(per_run, ["seed", "variant", "test_accuracy", "train_accuracy",
                                                    "trainable_params", "total_params", "codebook_usage",
                                                    "quantize_calls"]),
            "# ordering full >= no_coherence >= fixed_pooling >= continuous_features (reported only)",
            rpt.render_table(result.ordering()),
            "# pairwise mean differences (row minus column variant)",
            rpt.render_table([{"pair": k, "delta": v} for k, v in result.pairwise_deltas().items()]),
            "# full minus zero_shot per seed",
            rpt.render_table([{"seed": s, "gap": g} for s, g in result.gap_per_seed().items()])]
    ctx.path("ablation.txt").write_text("\n".join(text))
    table = [dict(schema=rpt.SCHEMA, digest=ctx.digest, kind="ablation_row", **r) for r in rows]
    rpt.append_records(log, table)
    if ctx.args.figures:
        rpt.ablation_figure({r["variant"]: r["acc_mean"] for r in rows}, {r["variant"]: r["acc_sd"] for r in rows},
                            ctx.path("ablation.png"), {v.value: runner.VARIANT_LABELS[v] for v in runner.VARIANTS})
    sys.stdout.write(text[1])
    for seed, gap in result.gap_per_seed().items():
        if not gap > 0:
            raise GateFailure(f"full does not beat zero_shot on seed {seed} (gap {gap:+.4f})")
    return 0


def cmd_sweep(ctx: Context) -> int:
    values = _int_list(ctx.args.values)
    seeds = _int_list(ctx.args.seeds)
    if not values:
        raise UsageError("--values is empty")
    axis = ctx.args.axis

    def progress(cell):
        state = f"accuracy {cell.test_accuracy:.4f}" if cell.ok else f"failed: {cell.error}"
        _say(f"{axis}={cell.value} seed {cell.seed}: {state}")

    cells = runner.sweep(axis, values, ctx.cfg, seeds, progress=progress)
    rows = runner.sweep_table(cells)
    records = [dict(schema=rpt.SCHEMA, digest=ctx.digest, kind="sweep_cell", axis=c.axis, value=c.value,
                    seed=c.seed, test_accuracy=c.test_accuracy, codebook_usage=c.codebook_usage, error=c.error)
               for c in cells]
    records += [dict(schema=rpt.SCHEMA, digest=ctx.digest, kind="sweep_row", **r) for r in rows]
    rpt.write_records(ctx.path(f"sweep_{axis}.jsonl"), records)
    text = rpt.render_table(rows, ["axis", "value", "runs", "failed", "acc_mean", "acc_sd", "usage_mean", "usage_sd"])
    ctx.path(f"sweep_{axis}.txt").write_text(text)
    if ctx.args.figures:
        rpt.sweep_figure(rows, ctx.path(f"sweep_{axis}.png"))
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(ctx: Context) -> int:
    from vtar.gradsuite import run_suite

    res = run_suite(points=ctx.args.points, seed=ctx.seed,
                    progress=lambda name, err: _say(f"{name:<18} max relative error {err:.3e}"))
    seconds = res.pop("_seconds")
    _say(f"{len(res)} components in {seconds:.1f}s")
    bad = [n for n, e in res.items() if not e < GRAD_TOLERANCE]
    if bad:
        raise GateFailure(f"gradient check above {GRAD_TOLERANCE:g} for {', '.join(bad)}")
    return 0


def cmd_report(args) -> int:
    records = rpt.join_reports(args.paths)
    if args.kind != "all":
        records = [r for r in records if r.get("kind") == args.kind]
    drop = {"schema", "digest"}
    rows = [{k: v for k, v in r.items() if k not in drop and not isinstance(v, list)} for r in records]
    sys.stdout.write(rpt.render_table(rows))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vtem": cmd_train_vtem,
    "tokenize": cmd_tokenize,
    "pretrain-reasoner": cmd_pretrain,
    "tune-prompts": cmd_tune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def _fail(exc: BaseException, code: int) -> int:
    sys.stdout.flush()
    msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": msg}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "report":
            return cmd_report(args)
        # finiteness is checked explicitly at every op, so numpy's own warnings are noise
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return COMMANDS[args.command](Context(args))
    except VtarError as exc:
        return _fail(exc, exc.exit_code)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail(ConfigError(f"cannot read {exc.filename}: {exc.strerror}"), 3)
    except ValueError as exc:
        return _fail(exc, 3)
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
