"""Command-line driver: ``distilsrl <command> [--config C] [--out DIR] [--seed N]``.

Artifacts land in ``--out`` (or ``$DISTILSRL_OUT``, default ``./run``)::

    data/manifest.tsv, data/{train,test}/*.f32      gen-data
    teacher.ckpt, teacher_trace.csv                 train-teacher
    distilled.ckpt, distill_trace.csv               distill
    finetune_<tag>.ckpt, finetune_<tag>_trace.csv   finetune  (tag: kws|sv|multi, +_frozen)
    metrics_<stem>.csv, trials_<stem>.tsv           evaluate
    run-<command>.json                              every command

Failures print one JSON line to stderr and exit 2 (missing or unreadable
input), 3 (configuration) or 4 (numeric divergence).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, Config, ConfigFileError, resolve_config
from .data import generate_synthetic, load_split
from .distill import write_distill_trace
from .metrics import write_metric_report, write_trials
from .model import ConfigError
from .tensor import NonFiniteError
from .trainer import DivergenceError, TraceRow, write_trace

OUT_ENV = "DISTILSRL_OUT"
EXIT_MISSING, EXIT_CONFIG, EXIT_DIVERGED = 2, 3, 4


class MissingInput(Exception):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def echo_text(cfg: Config) -> str:
    """Config text for checkpoint headers: the file verbatim, then any overrides."""
    text = cfg.text
    if cfg.overrides:
        if text and not text.endswith("\n"):
            text += "\n"
        text += "# command-line overrides\n" + "".join(f"{k} = {v}\n" for k, v in cfg.overrides.items())
    return text


class Run:
    def __init__(self, args, cfg: Config):
        self.args, self.cfg = args, cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []

    def path(self, name: str) -> Path:
        return self.out / name

    def produced(self, *paths: Path) -> None:
        self.artifacts.extend(paths)

    def manifest(self) -> Path:
        return _require(self.path("data") / "manifest.tsv", "synthetic corpus manifest (run gen-data)")

    def load(self, path: Path, what: str):
        _require(path, what)
        return load_checkpoint(path)

    def record(self, command: str, extra: dict | None = None) -> Path:
        rec = {
            "command": command,
            "argv": sys.argv[1:],
            "seed": self.cfg["seed"],
            "config_source": self.args.config or "defaults",
            "overrides": self.cfg.overrides or {},
            "resolved_config": self.cfg.resolved_text().splitlines(),
            "artifacts": {str(p.relative_to(self.out)): _digest(p) for p in self.artifacts if p.is_file()},
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        rec.update(extra or {})
        path = self.path(f"run-{command}.json")
        path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
        return path


# --------------------------------------------------------------------------- commands

def cmd_gen_data(run: Run) -> None:
    manifest = generate_synthetic(pipeline.synth_spec(run.cfg), run.path("data"))
    run.produced(run.path("data") / "manifest.tsv", *(run.path("data") / e.path for e in manifest.entries))
    print(f"wrote {len(manifest.entries)} utterances to {run.path('data')}")


def cmd_train_teacher(run: Run) -> None:
    train = load_split(run.manifest(), "train")
    res = pipeline.train_teacher(run.cfg, train)
    ckpt, trace = run.path("teacher.ckpt"), run.path("teacher_trace.csv")
    save_checkpoint(ckpt, res.model, res.heads, config_text=echo_text(run.cfg))
    write_trace(trace, res.trace)
    run.produced(ckpt, trace)
    print(f"teacher: {len(res.trace)} iterations, final loss {res.trace[-1].loss:.4f}" if res.trace
          else "teacher: 0 iterations")


def cmd_distill(run: Run) -> None:
    ck = run.load(run.path("teacher.ckpt"), "teacher checkpoint (run train-teacher)")
    train = load_split(run.manifest(), "train")
    if ck.model is None:
        raise CheckpointError(f"{run.path('teacher.ckpt')}: holds no encoder")
    res = pipeline.distill_student(run.cfg, ck.model, train.waves)
    ckpt, trace = run.path("distilled.ckpt"), run.path("distill_trace.csv")
    save_checkpoint(ckpt, res.student, config_text=echo_text(run.cfg), plan=res.plan)
    write_distill_trace(trace, res.trace, res.plan.teacher_layers)
    run.produced(ckpt, trace)
    print(f"distilled: {len(res.trace)} steps" + (f", final loss {res.trace[-1].total:.4f}" if res.trace else ""))


def _read_trace(path: Path, upto: int) -> list[TraceRow]:
    with open(path, newline="") as fh:
        rows = [TraceRow(int(r["iteration"]), r["task"], float(r["loss"])) for r in csv.DictReader(fh)]
    return [r for r in rows if r.iteration < upto]


def cmd_finetune(run: Run) -> None:
    tasks = pipeline.TASK_SETS[run.args.tasks]
    tag = run.args.tasks + ("_frozen" if run.args.freeze else "")
    ckpt, trace_path = run.path(f"finetune_{tag}.ckpt"), run.path(f"finetune_{tag}_trace.csv")
    state_path = run.path(f"finetune_{tag}_state.ckpt")

    earlier: list[TraceRow] = []
    if run.args.resume:
        ck = run.load(state_path, "fine-tuning state checkpoint (set train.checkpoint_every)")
        if ck.model is None or ck.trainer_state is None:
            raise CheckpointError(f"{state_path}: not a fine-tuning state checkpoint")
        model, heads, state = ck.model, ck.heads, ck.trainer_state
        earlier = _read_trace(_require(trace_path, "partial fine-tuning trace"), state.iteration)
    else:
        ck = run.load(run.path("distilled.ckpt"), "distilled student checkpoint (run distill)")
        if ck.model is None:
            raise CheckpointError(f"{run.path('distilled.ckpt')}: holds no encoder")
        model, state = ck.model, None
        heads = pipeline.new_heads(run.cfg, model.config.model_dim, tasks, "finetune")
    train = load_split(run.manifest(), "train")

    def on_checkpoint(st, trace):
        save_checkpoint(state_path, model, heads, config_text=echo_text(run.cfg), trainer_state=st)
        write_trace(trace_path, earlier + trace)

    res = pipeline.finetune(run.cfg, model, train, tasks, freeze=run.args.freeze, heads=heads,
                            state=state, on_checkpoint=on_checkpoint)
    write_trace(trace_path, earlier + res.trace)
    save_checkpoint(ckpt, res.model, res.heads, config_text=echo_text(run.cfg), trainer_state=res.state)
    run.produced(ckpt, trace_path)
    print(f"finetune {tag}: {res.state.iteration} iterations")


def cmd_evaluate(run: Run) -> None:
    path = Path(run.args.checkpoint) if run.args.checkpoint else run.path("finetune_multi.ckpt")
    ck = run.load(path, "fine-tuned checkpoint (run finetune)")
    if ck.model is None or not ck.heads:
        raise CheckpointError(f"{path}: needs an encoder and at least one task head")
    test = load_split(run.manifest(), "test")
    ev = pipeline.evaluate(run.cfg, ck.model, ck.heads, test)
    stem = path.stem
    metrics = run.path(f"metrics_{stem}.csv")
    write_metric_report(metrics, ev.reports)
    run.produced(metrics)
    if ev.trials is not None:
        trials = run.path(f"trials_{stem}.tsv")
        write_trials(trials, ev.trials)
        run.produced(trials)
    for r in ev.reports:
        print(f"{r.task} {r.metric} {r.value:.4f} (n={r.n})")


def cmd_count_params(run: Run) -> dict:
    if run.args.config == "base-reference":
        counts = pipeline.reference_parameter_counts()
    else:
        counts = pipeline.parameter_counts(run.cfg, run.cfg["kws.classes"], run.cfg["data.speakers"])
    for key, value in counts.items():
        print(f"{key} {value:.4f}" if isinstance(value, float) else f"{key} {value}")
    return {"parameter_counts": counts}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "count-params": cmd_count_params,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"config file or preset ({', '.join(PRESETS)}); default: toy defaults")
    common.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./run)")
    common.add_argument("--seed", type=int, default=None, help="root seed, overrides the config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="distilsrl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus")
    sub.add_parser("train-teacher", parents=[common], help="train the deep teacher encoder")
    sub.add_parser("distill", parents=[common], help="distill the teacher into the shallow student")
    ft = sub.add_parser("finetune", parents=[common], help="fine-tune the distilled student")
    ft.add_argument("--tasks", choices=sorted(pipeline.TASK_SETS), default="multi")
    ft.add_argument("--freeze", action="store_true", help="train the task heads only")
    ft.add_argument("--resume", action="store_true", help="continue from the last state checkpoint")
    ev = sub.add_parser("evaluate", parents=[common], help="score a fine-tuned checkpoint on the test split")
    ev.add_argument("--checkpoint", help="default: <out>/finetune_multi.ckpt")
    sub.add_parser("count-params", parents=[common], help="print teacher and student parameter counts")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.out = args.out or os.environ.get(OUT_ENV) or "run"
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigFileError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.config and args.config not in PRESETS and not Path(args.config).exists():
            raise MissingInput(f"config file not found: {args.config}")
        cfg = resolve_config(args.config, overrides)
        run = Run(args, cfg)
        extra = COMMANDS[args.command](run)
        run.record(args.command, extra)
    except MissingInput as exc:
        return _fail(EXIT_MISSING, "missing-input", str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_MISSING, "bad-input", str(exc))
    except (ConfigFileError, ConfigError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (DivergenceError, NonFiniteError) as exc:
        return _fail(EXIT_DIVERGED, "diverged", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
