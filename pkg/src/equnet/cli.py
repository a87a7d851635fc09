"""``equnet`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 equivariance
certificate failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path


from . import report as report_mod
from .checkpoint import CheckpointError, load_checkpoint, read_header
from .config import ConfigError, RunConfig, color_norm_from, load_dataset, load_run_config
from .data import DatasetError
from .equicheck import DTYPES, certify
from .training import NumericalError, evaluate, make_folds, make_grouped_folds, train_run
from .unet import FAMILIES, SIZES, ArchError, build_model, count_params, preset

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_CERT = 0, 1, 2, 3
DATA_SETTINGS = ("large", "small")
PARAM_BANDS = {("vanilla", "small"): 500_000, ("vanilla", "large"): 11_000_000}

log = logging.getLogger("equnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.n_epochs=5 (repeatable)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--seed", type=int, help="seed for model init, folds and augmentation")
    p.add_argument("--precision", choices=sorted(DTYPES), default="f32")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="equnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("crossval", help="5-fold cross-validation of one cell (or the full grid)")
    _common(p)
    p.add_argument("--grid", action="store_true", help="run all family x size x data-setting cells")

    p = sub.add_parser("train", help="train on a single fold")
    _common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the configured test fold")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("equicheck", help="certify end-to-end equivariance")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint to certify (default: fresh model from config)")
    p.add_argument("--probes", type=int, default=8)

    p = sub.add_parser("params", help="trainable parameter counts per preset")
    p.add_argument("presets", nargs="*", metavar="FAMILY-SIZE", help="e.g. c4-small (default: all)")

    p = sub.add_parser("report", help="aggregate tables and IoU-over-time curves")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: RUN_DIR/report)")
    return parser


# -- helpers ----------------------------------------------------------------

def _dtype(args) -> type:
    return DTYPES[args.precision]


def _fold_plan(dataset, seed: int):
    sources = [p.source for p in dataset]
    if len(set(sources)) < len(sources):
        return make_grouped_folds(sources, seed)
    return make_folds(len(dataset), seed)


def _cell_configs(rc: RunConfig, grid: bool) -> list[RunConfig]:
    if not grid:
        return [rc]
    out = []
    for fam, size, setting in itertools.product(FAMILIES, SIZES, DATA_SETTINGS):
        arch = preset(fam, size, in_channels=rc.arch.in_channels, n_classes=rc.arch.n_classes,
                      input_hw=rc.arch.input_hw, pool_mode=rc.arch.pool_mode)
        train = type(rc.train)(**{**vars(rc.train), "data_setting": setting})
        out.append(RunConfig(arch, train, rc.folds, rc.model_seed, rc.eval_every, rc.data,
                             rc.dataset_presets, rc.base_dir))
    return out


def grid_cells() -> list[str]:
    return [f"{f}-{s}-{d}" for f, s, d in itertools.product(FAMILIES, SIZES, DATA_SETTINGS)]


def _write_curve(log_, path: Path, iou_key: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "cumulative_seconds", iou_key])
        for r in log_.records:
            w.writerow([r.epoch, repr(r.cumulative_seconds), repr(r.metrics[iou_key])])


def _run_cell(rc: RunConfig, dataset, man, out: Path, dtype) -> dict:
    cell = rc.cell_name()
    cell_dir = out / cell
    cell_dir.mkdir(parents=True, exist_ok=True)
    meta = {"cell": cell, "family": rc.arch.family, "size": rc.arch.size,
            "data_setting": rc.train.data_setting, "n_epochs": rc.train.n_epochs,
            "seed": rc.train.seed, "folds": list(rc.folds)}
    (cell_dir / "cell.json").write_text(json.dumps(meta, indent=2) + "\n")
    plan = _fold_plan(dataset, rc.train.seed)
    for fold in rc.folds:
        log.info("cell %s fold %d", cell, fold)
        model = build_model(rc.arch, seed=rc.model_seed, dtype=dtype)
        fold_dir = cell_dir / f"fold{fold}"
        res = train_run(model, dataset, rc.train, fold, plan, fold_dir, color_norm_from(man), rc.eval_every)
        iou_key = "iou" if rc.arch.n_classes == 1 else "mean_iou"
        _write_curve(res.log, fold_dir / "time_vs_iou.csv", iou_key)
    row = report_mod.cell_row(report_mod.discover_cells(cell_dir)[0])
    with open(cell_dir / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    return row


def _table_line(row: dict) -> str:
    keys = [k for k in row if k.endswith("_mean")]
    return " | ".join([row["cell"], *(row[k[:-5]] for k in keys)])


# -- commands ---------------------------------------------------------------

def cmd_crossval(args) -> int:
    rc = load_run_config(args.config, args.overrides, args.seed)
    dataset, man = load_dataset(rc)
    for cell_rc in _cell_configs(rc, args.grid):
        row = _run_cell(cell_rc, dataset, man, args.out, _dtype(args))
        print(_table_line(row))
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.overrides, args.seed)
    dataset, man = load_dataset(rc)
    fold = rc.folds[0]
    model = build_model(rc.arch, seed=rc.model_seed, dtype=_dtype(args))
    res = train_run(model, dataset, rc.train, fold, _fold_plan(dataset, rc.train.seed),
                    args.out, color_norm_from(man), rc.eval_every)
    last = res.log.records[-1]
    print(f"fold {fold}: epoch {last.epoch} loss {last.loss:.4f} "
          + " ".join(f"{k} {v:.4f}" for k, v in last.metrics.items()))
    print(f"checkpoint: {res.final_checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rc = load_run_config(args.config, args.overrides, args.seed)
    header, _ = read_header(args.checkpoint)
    model = load_checkpoint(args.checkpoint, dtype=_dtype(args))
    if model.cfg.input_hw != rc.arch.input_hw:
        raise UsageError(f"checkpoint expects {model.cfg.input_hw}px inputs, config gives {rc.arch.input_hw}")
    dataset, man = load_dataset(rc)
    fold = rc.folds[0]
    test = [dataset[i] for i in _fold_plan(dataset, rc.train.seed).test_indices(fold)]
    extra = header.get("extra", {})
    norm = color_norm_from(man) or (extra.get("color_mean", (0.0, 0.0, 0.0)), extra.get("color_std", (1.0, 1.0, 1.0)))
    res = evaluate(model, test, *norm, batch_size=rc.train.batch_size)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "per_image.csv", "w", newline="") as fh:
        keys = list(res.mean)
        w = csv.writer(fh)
        w.writerow(["id", *keys])
        for s, m in zip(test, res.per_image):
            w.writerow([s.id, *(repr(m[k]) for k in keys)])
    print(" ".join(f"{k} {100 * v:.1f}" for k, v in res.mean.items()))
    return EXIT_OK


def cmd_equicheck(args) -> int:
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint, dtype=_dtype(args))
    else:
        rc = load_run_config(args.config, args.overrides, args.seed)
        model = build_model(rc.arch, seed=rc.model_seed, dtype=_dtype(args))
    cert = certify(model, n_probes=args.probes, precision=args.precision, seed=args.seed or 0)
    text = cert.render()
    print(text)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "certificate.txt").write_text(text + "\n")
    return EXIT_CERT if cert.status == "failed" else EXIT_OK


def params_table(names: list[str]) -> list[dict]:
    rows = []
    for name in names:
        try:
            fam, size = name.split("-")
            cfg = preset(fam, size)
        except ValueError:
            raise UsageError(f"unknown preset {name!r} (expected FAMILY-SIZE, e.g. c4-small)") from None
        n = count_params(cfg)
        ref = count_params(preset("vanilla", size))
        row = {"preset": name, "params": n, "ratio_to_vanilla": n / ref, "band": ""}
        if (fam, size) in PARAM_BANDS:
            target = PARAM_BANDS[(fam, size)]
            dev = n / target - 1
            row["band"] = f"{dev:+.1%} vs {target:,} ({'in' if abs(dev) <= 0.10 else 'outside'} +-10%)"
        rows.append(row)
    return rows


def cmd_params(args) -> int:
    names = args.presets or [f"{f}-{s}" for s in SIZES for f in FAMILIES]
    rows = params_table(names)
    print(f"{'preset':<14} {'params':>12} {'x vanilla':>10}  band")
    for r in rows:
        print(f"{r['preset']:<14} {r['params']:>12,} {r['ratio_to_vanilla']:>10.3f}  {r['band']}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = args.out or args.run_dir / "report"
    res = report_mod.build_report(args.run_dir, out)
    with open(res.table, newline="") as fh:
        for row in csv.DictReader(fh):
            print(_table_line(row))
    for note in res.notes:
        print(f"note: {note}")
    print(f"table: {res.table}")
    for f in res.figures:
        print(f"figure: {f}")
    return EXIT_OK


COMMANDS = {
    "crossval": cmd_crossval, "train": cmd_train, "evaluate": cmd_evaluate,
    "equicheck": cmd_equicheck, "params": cmd_params, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigError, DatasetError, CheckpointError, ArchError,
            report_mod.ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
