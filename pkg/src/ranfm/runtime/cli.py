"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..datapile import AnomalySpec, CurateOptions, CurationError, SplitSpec, curate, load_curated, write_curated, write_dataset
from ..model import Model, ModelConfig, init_params
from ..numerics import GraphError, NumericError, get_dtype, set_precision
from ..tasks import TASK_REGIMES, evaluate
from ..training import ContractError, TrainConfig, TrainingDivergence, UnsupportedRegime, finetune, pretrain
from .bench import bench_grid, rows_to_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .simulate import SCENARIOS, ScenarioSpec, simulate_telemetry
from .stream import DEFAULT_HOP, StreamError, read_csv_stream, stream_infer

log = logging.getLogger("ranfm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TASKS = ("anomaly", "classify", "forecast", "impute")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # global flags work before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--precision", type=int, choices=(32, 64), default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="ranfm", description="RAN telemetry foundation model toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="<command>")
    sub.required = True

    s = sub.add_parser("curate", parents=[common], help="curate raw CSV telemetry")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--inject-anomalies", dest="inject")
    s.add_argument("--split", choices=("temporal", "per_series", "provided"), default="temporal")
    s.add_argument("--task", choices=("pretrain",) + TASKS, default="pretrain")
    s.add_argument("--train-fraction", type=float, default=0.7)

    s = sub.add_parser("pretrain", parents=[common], help="masked-reconstruction pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss-csv")

    s = sub.add_parser("finetune", parents=[common], help="adapt a checkpoint to a task")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", choices=TASKS, required=True)
    s.add_argument("--regime", choices=("ff", "lp", "zero"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--horizon", type=int)
    s.add_argument("--classes", type=int)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on test splits")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", choices=TASKS, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--regime", choices=("ff", "lp", "zero"))

    s = sub.add_parser("infer", parents=[common], help="sliding-window inference over a CSV stream")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", choices=TASKS, required=True)
    s.add_argument("--stream", required=True, help="CSV path or - for standard input")
    s.add_argument("--hop", type=int, default=DEFAULT_HOP)
    s.add_argument("--out", help="JSON-lines output (default standard output)")

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic scenario trace")
    s.add_argument("--scenario", choices=SCENARIOS, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--duration", type=int, default=4096)
    s.add_argument("--channels", type=int, default=4)
    s.add_argument("--window", type=int, default=512, help="model window the trace must cover")

    s = sub.add_parser("bench", parents=[common], help="per-window latency and memory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--window", type=_int_list, required=True, help="T or comma-separated list")
    s.add_argument("--channels", type=_int_list, required=True, help="C or comma-separated list")
    s.add_argument("--repeat", type=int, default=10)
    s.add_argument("--out", help="CSV output (default standard output)")
    return p


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CurationError(f"{path}: invalid JSON ({exc})") from exc


def _load_model(path, bits: int) -> tuple[Model, TrainConfig | None, dict]:
    params, mcfg, tcfg, extra = load_checkpoint(path)
    if bits == 64:
        params = params.astype(np.float64)
    return Model(mcfg, params), tcfg, extra


def _task_data(directory, split: str, task: str) -> list:
    """Splits curated for ``task``; generic (pretrain) splits when none are."""
    data = load_curated(directory, split=split, task=task)
    if not data:
        data = load_curated(directory, split=split, task="pretrain")
    if not data:
        raise CurationError(f"no {task} or generic {split} splits in {directory}")
    return data


def _train_config(blob: dict | None, seed: int | None, **overrides) -> TrainConfig:
    d = dict(blob or {})
    if seed is not None:
        d["seed"] = seed
    d.update(overrides)
    return TrainConfig.from_dict(d)


def _cmd_curate(a) -> int:
    specs = None
    if a.inject:
        raw = _read_json(a.inject)
        items = raw.get("anomalies", raw) if isinstance(raw, dict) else raw
        specs = [AnomalySpec.from_dict(s) for s in items]
    opts = CurateOptions(task=a.task, anomalies=specs, split=SplitSpec(a.split, a.train_fraction),
                         seed=a.seed or 0)
    result = curate(a.input, opts)
    if not result.datasets:
        raise CurationError(f"no dataset survived curation: {result.failures}")
    path = write_curated(result, a.out)
    log.info("curated %d datasets (%d failures) -> %s", len(result.datasets), len(result.failures), path)
    return EXIT_OK


def _cmd_pretrain(a) -> int:
    conf = _read_json(a.config)
    mblob = conf.get("model", {})
    mcfg = (ModelConfig.from_variant(mblob.pop("variant"), **mblob) if "variant" in mblob and mblob.get("variant") != "custom"
            else ModelConfig.from_dict(mblob))
    tcfg = _train_config(conf.get("train"), a.seed, regime="pretrain")
    data = [d for d in load_curated(a.data, split="train") if d.task != "anomaly"]
    if not data:
        raise CurationError(f"no non-anomaly training splits in {a.data}")
    model = Model(mcfg, init_params(mcfg, tcfg.seed))
    result = pretrain(data, model, tcfg)
    if a.loss_csv:
        result.curve.write_csv(a.loss_csv)
    save_checkpoint(a.out, result.model.params, result.model.cfg, tcfg,
                    {"stage": "pretrain", "final_loss": result.curve.losses[-1]})
    log.info("pretrained %d steps, final loss %.6f -> %s", tcfg.total_steps, result.curve.losses[-1], a.out)
    return EXIT_OK


def _cmd_finetune(a) -> int:
    model, base_tcfg, _ = _load_model(a.ckpt, a.precision)
    blob = _read_json(a.config).get("train") if a.config else (base_tcfg.to_dict() if base_tcfg else None)
    tcfg = _train_config(blob, a.seed, regime=a.regime)
    data = _task_data(a.data, "train", a.task) if a.regime != "zero" else []
    result = finetune(model, a.task, a.regime, data, tcfg, horizon=a.horizon, n_classes=a.classes)
    save_checkpoint(a.out, result.model.params, result.model.cfg, tcfg,
                    {"stage": "finetune", "task": a.task, "regime": a.regime})
    log.info("fine-tuned (%s, %s) -> %s", a.task, a.regime, a.out)
    return EXIT_OK


def _cmd_eval(a) -> int:
    model, _, extra = _load_model(a.ckpt, a.precision)
    regime = a.regime or (extra.get("regime") if extra.get("task") == a.task else None)
    if regime is None:
        regime = "zero" if "zero" in TASK_REGIMES[a.task] else "ff"
    data = _task_data(a.data, "test", a.task)
    reports = [evaluate(model, d, a.task, regime, seed=a.seed or 0).to_dict() for d in data]
    out = reports[0] if len(reports) == 1 else reports
    Path(a.report).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d report(s) -> %s", len(reports), a.report)
    return EXIT_OK


def _cmd_infer(a) -> int:
    if a.hop < 1:
        raise UsageError("--hop must be >= 1")
    model, _, _ = _load_model(a.ckpt, a.precision)
    fh = sys.stdin if a.stream == "-" else open(a.stream, encoding="utf-8", newline="")
    out = sys.stdout if not a.out else open(a.out, "w", encoding="utf-8")
    n = 0
    try:
        for rec in stream_infer(read_csv_stream(fh), model, a.task, a.hop):
            out.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    finally:
        if fh is not sys.stdin:
            fh.close()
        if out is not sys.stdout:
            out.close()
    log.info("%d inference records", n)
    return EXIT_OK


def _cmd_simulate(a) -> int:
    spec = ScenarioSpec(a.scenario, duration=a.duration, n_channels=a.channels, seed=a.seed or 0,
                        window=a.window)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(simulate_telemetry(spec), a.out)
    return EXIT_OK


def _cmd_bench(a) -> int:
    model, _, _ = _load_model(a.ckpt, a.precision)
    if a.repeat < 3:
        raise UsageError("--repeat must be >= 3")
    text = rows_to_csv(bench_grid(model, a.window, a.channels, a.repeat, seed=a.seed or 0))
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"curate": _cmd_curate, "pretrain": _cmd_pretrain, "finetune": _cmd_finetune, "eval": _cmd_eval,
            "infer": _cmd_infer, "simulate": _cmd_simulate, "bench": _cmd_bench}


def run_cli(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    a.seed = getattr(a, "seed", None)
    a.precision = getattr(a, "precision", 32)
    a.quiet = getattr(a, "quiet", False)
    logging.basicConfig(level=logging.ERROR if a.quiet else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    previous = 64 if get_dtype() == np.float64 else 32
    set_precision(a.precision)
    try:
        return COMMANDS[a.command](a)
    except (UsageError, UnsupportedRegime) as exc:
        print(f"ranfm {a.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingDivergence, FloatingPointError, GraphError) as exc:
        print(f"ranfm {a.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CurationError, CheckpointError, StreamError, ContractError, OSError, ValueError, KeyError) as exc:
        print(f"ranfm {a.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        set_precision(previous)


def main() -> None:
    sys.exit(run_cli())
