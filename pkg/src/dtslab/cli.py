"""Command-line experiment runner.

Subcommands: gen-data, train, eval, ablate, select-setting, report.
Exit codes: 0 success, 1 usage error, 2 runtime failure; all failures print
a single `error: ...` line to stderr.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .config import GenConfig, load_gen_config, load_train_config
from .errors import ConfigError, DtsError
from .metrics import read_metrics_csv
from .model import SegArch, SegNet, load_into, load_params
from .report import write_report
from .shapesworld import generate_benchmark, read_dataset
from .trainer import DtsTrainer, TrainerConfig, evaluate_model, select_setting

__all__ = ["main", "cli"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise UsageError(message)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {raw!r}")


_SETTINGS = {
    "group1-only": {"group1": "group1", "group2": ""},
    "A": {"group1": "group1", "group2": "setting_a"},
    "B": {"group1": "group1", "group2": "setting_b"},
    "tt-only": {"group1": "group1", "group2": "tt_only"},
    "st-only": {"group1": "group1", "group2": "st_only"},
    "supervised": {"group1": "s_only", "group2": ""},
}

_ROUTING_FLAGS = ("default", "table5-row1", "table5-row2", "table5-row3",
                  "table5-row4", "table5-row5")


def build_parser() -> _Parser:
    p = _Parser(prog="dtslab", description="dual teacher-student segmentation lab")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="emit a ShapesWorld dataset")
    g.add_argument("--config", help="INI file with a [gen] section")
    g.add_argument("--out", help="output dataset directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--source", type=int, help="number of source training images")
    g.add_argument("--target", type=int, help="number of target training images")
    g.add_argument("--eval", type=int, help="number of target eval images")
    g.add_argument("--source-eval", type=int, help="number of source eval images")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--classes", type=int)

    t = sub.add_parser("train", help="run one training configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--setting", choices=sorted(_SETTINGS))
    t.add_argument("--bidirectional", type=_parse_bool, metavar="BOOL")
    t.add_argument("--routing", choices=_ROUTING_FLAGS)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True,
                   help="checkpoint file, or a run directory")
    e.add_argument("--data", required=True,
                   help="dataset directory (a split, or a benchmark root)")

    a = sub.add_parser("ablate", help="run the five-column ablation grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)

    s = sub.add_parser("select-setting", help="compare Prob logs of two runs")
    s.add_argument("--run-a", required=True, help="run directory of setting A")
    s.add_argument("--run-b", required=True, help="run directory of setting B")

    r = sub.add_parser("report", help="per-class table and SVG chart from runs")
    r.add_argument("--runs", required=True, nargs="+", help="run directories")
    r.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    cfg = load_gen_config(args.config) if args.config else GenConfig()
    overrides = {"out_dir": args.out, "seed": args.seed, "n_source": args.source,
                 "n_target": args.target, "n_eval": args.eval,
                 "n_source_eval": args.source_eval, "height": args.height,
                 "width": args.width, "num_classes": args.classes}
    for attr, val in overrides.items():
        if val is not None:
            setattr(cfg, attr, val)
    if not cfg.out_dir:
        raise UsageError("gen-data: --out (or [gen] out) is required")
    cfg.validate()
    manifest = generate_benchmark(
        cfg.out_dir, seed=cfg.seed, n_source=cfg.n_source, n_target=cfg.n_target,
        n_eval=cfg.n_eval, height=cfg.height, width=cfg.width,
        num_classes=cfg.num_classes, paired=cfg.paired,
        n_source_eval=cfg.n_source_eval)
    total = sum(s["count"] for s in manifest["splits"].values())
    print(f"wrote {total} samples under {cfg.out_dir}")
    return 0


def load_benchmark(data_dir):
    """Read (source samples, target images, target eval samples) from a root."""
    source = read_dataset(os.path.join(data_dir, "source", "train"))
    target = [s.image for s in read_dataset(os.path.join(data_dir, "target", "train"))]
    eval_dir = os.path.join(data_dir, "target", "eval")
    eval_samples = read_dataset(eval_dir) if os.path.isdir(eval_dir) else []
    return source, target, eval_samples


def run_training(cfg: TrainerConfig):
    """Load the benchmark named by the config and run it to completion."""
    if not cfg.data_dir:
        raise ConfigError("train: config has no [data] dir")
    source, target, eval_samples = load_benchmark(cfg.data_dir)
    trainer = DtsTrainer(cfg, source_samples=source, target_images=target,
                         eval_samples=eval_samples)
    return trainer.run()


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if args.setting is not None:
        for attr, val in _SETTINGS[args.setting].items():
            setattr(cfg, attr, val)
    if args.bidirectional is not None:
        cfg.bidirectional = args.bidirectional
    if args.routing is not None:
        cfg.routing = args.routing
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    result = run_training(cfg)
    if result.eval_rows:
        last = result.eval_rows[-1]
        print(f"final iter={last.iteration} miou={last.miou:.4f}")
    else:
        print(f"finished {cfg.total_iters} iterations (no eval set)")
    return 0


def _arch_from_params(params) -> SegArch:
    try:
        return SegArch(num_classes=params["head.w"].shape[0],
                       in_channels=params["enc1.w"].shape[1],
                       stem_channels=params["enc1.w"].shape[0],
                       hidden_channels=params["enc2.w"].shape[0])
    except KeyError as exc:
        raise ConfigError(f"checkpoint is missing parameter {exc}") from exc


def _cmd_eval(args) -> int:
    ckpt = args.checkpoint
    if os.path.isdir(ckpt):
        for name in ("g2_student", "g1_student"):
            candidate = os.path.join(ckpt, name)
            if os.path.exists(candidate):
                ckpt = candidate
                break
        else:
            raise ConfigError(f"no model files in run directory {args.checkpoint}")
    params = load_params(ckpt)
    arch = _arch_from_params(params)
    net = SegNet.init(arch, seed=0)
    load_into(net, ckpt)

    data = args.data
    nested = os.path.join(data, "target", "eval")
    if os.path.isdir(nested):
        data = nested
    samples = read_dataset(data)
    if not samples:
        raise ConfigError(f"eval: no samples under {data}")
    ious, m = evaluate_model(net, samples, arch.num_classes)
    parts = [f"miou={m:.4f}"]
    parts += [f"iou_{i}={v:.4f}" for i, v in enumerate(ious)]
    print(" ".join(parts))
    return 0


def ablation_grid(cfg: TrainerConfig, out_dir) -> list[TrainerConfig]:
    """The five-column grid: baseline, focus-only, DTS+focus, DTS+bidir, full."""
    focus = cfg.group2 or "setting_b"
    columns = [
        ("col1_baseline", {"group1": "group1", "group2": ""}),
        ("col2_focus_only", {"group1": focus, "group2": ""}),
        ("col3_dts_focus", {"group1": "group1", "group2": focus,
                            "bidirectional": False}),
        ("col4_dts_bidir", {"group1": "group1", "group2": "group1",
                            "bidirectional": True}),
        ("col5_full", {"group1": "group1", "group2": focus,
                       "bidirectional": True}),
    ]
    grid = []
    for name, over in columns:
        run = replace(cfg, run_id=name, out_dir=os.path.join(out_dir, name), **over)
        run.validate()
        grid.append(run)
    return grid


def _run_one(cfg: TrainerConfig) -> tuple[str, float]:
    result = run_training(cfg)
    final = result.eval_rows[-1].miou if result.eval_rows else float("nan")
    return cfg.run_id, final


def _cmd_ablate(args) -> int:
    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    grid = ablation_grid(cfg, args.out)
    workers = os.environ.get("DTS_THREADS", "1")
    try:
        workers = max(1, int(workers))
    except ValueError:
        raise UsageError(f"DTS_THREADS must be an integer, got {workers!r}")
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(workers, len(grid))) as pool:
            results = list(pool.map(_run_one, grid))
    else:
        results = [_run_one(c) for c in grid]
    for name, m in results:
        print(f"{name}: miou={m:.4f}")
    return 0


def _final_prob(run_dir) -> float:
    cols, rows = read_metrics_csv(os.path.join(run_dir, "metrics.csv"))
    if not rows:
        raise ConfigError(f"{run_dir}: metrics.csv has no rows")
    return rows[-1][cols.index("prob")]


def _cmd_select_setting(args) -> int:
    prob_a = _final_prob(args.run_a)
    prob_b = _final_prob(args.run_b)
    if prob_a != prob_a or prob_b != prob_b:
        raise ConfigError("select-setting: a run has no recorded Prob values "
                          "(was group 2 enabled?)")
    chosen = select_setting(prob_a, prob_b)
    name = "setting_b" if chosen.tags == ("ST", "TT") else "setting_a"
    print(f"selected={name} prob_a={prob_a:.4f} prob_b={prob_b:.4f}")
    return 0


def _cmd_report(args) -> int:
    table = write_report(args.runs, args.out)
    print(table, end="")
    print(f"wrote report.txt and chart.svg under {args.out}")
    return 0


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "select-setting": _cmd_select_setting,
    "report": _cmd_report,
}


def cli(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand "
                             "(gen-data|train|eval|ablate|select-setting|report)")
        return _DISPATCH[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DtsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return cli(argv)
