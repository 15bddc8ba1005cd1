"""Command-line entry points: ``eval``, ``toy-train``, ``ablate`` and ``gradcheck``.

Configuration precedence for ``toy-train`` and ``ablate``: built-in defaults,
then the ``--config`` file, then ``--set key=value`` flags, then ``--seed``.
Every command writes only inside ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .config import ConfigKeyError, RunConfig, format_config, load_config
from .evaluation import CATEGORIES, evaluation_summary, format_summary_table
from .kitti_io import KittiParseError, read_label_dir
from .tensor import ConfigurationError, ContractError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_PARSE = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    for flag, path in (("--gt", args.gt), ("--det", args.det)):
        if path is None:
            _err(f"{flag} is required")
            return EXIT_USAGE
        if not Path(path).is_dir():
            _err(f"{flag} directory not found: {path}")
            return EXIT_USAGE
    try:
        gt = read_label_dir(args.gt)
        det = read_label_dir(args.det, default_score=1.0)
    except KittiParseError as exc:
        _err(f"malformed label file {exc.path}, line {exc.line}: {exc.reason}")
        return EXIT_PARSE
    extra = sorted(set(det) - set(gt))
    if extra:
        _err(f"detection frames without ground truth: {', '.join(extra[:5])}{' ...' if len(extra) > 5 else ''}")
        return EXIT_USAGE
    records = evaluation_summary(gt, det, args.category, args.iou, args.mode)
    print(format_summary_table(records))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_summary.json", records)
    return EXIT_OK


# ---------------------------------------------------------------------------
# training


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.config is not None and not Path(args.config).is_file():
        raise FileNotFoundError(f"config file not found: {args.config}")
    return load_config(args.config, overrides)


HISTORY_FIELDS = ("step", "l_app", "l_loc", "s_app", "s_loc", "total")


def write_history_csv(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row.step] + [repr(float(getattr(row, k))) for k in HISTORY_FIELDS[1:]])


def cmd_toy_train(args) -> int:
    from .plotting import plot_history
    from .toy import TrainingDiverged, config_dict, evaluate_detector, train

    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        det, history = train(cfg.train)
    except TrainingDiverged as exc:
        _err(f"training diverged at step {exc.step} (loss {exc.value})")
        return EXIT_FAIL
    write_history_csv(out / "history.csv", history)
    (out / "config.txt").write_text(format_config(cfg))
    checkpoint.save(out / "model.ckpt", checkpoint.Checkpoint(det.state_dict(), config_dict(cfg.train)))
    res = evaluate_detector(det, cfg.n_eval, cfg.iou, cfg.mode, score_thresh=cfg.score_thresh)
    ap = {k: (None if math.isnan(v) else v) for k, v in res.ap.items()}
    _write_json(out / "metrics.json", {"ap": ap, "accuracy": res.accuracy, "n_scenes": res.n_scenes,
                                       "iou": cfg.iou, "mode": cfg.mode.upper()})
    plot_history(history, out / "loss.png")
    last = history[-1]
    print(f"trained {len(history)} steps; final total loss {last.total:.4f}")
    print(f"held-out accuracy {res.accuracy:.3f}; Car AP_3D {res.car_ap3d:.4f} ({cfg.mode.upper()} @ {cfg.iou})")
    print(f"wrote {out / 'history.csv'}, {out / 'model.ckpt'}, {out / 'metrics.json'}, {out / 'loss.png'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation
    from .toy import ABLATIONS, ablate

    cfg = _run_config(args)
    table_name = args.table or cfg.table
    if table_name not in ABLATIONS:
        _err(f"unknown ablation table {table_name!r}; expected one of {sorted(ABLATIONS)}")
        return EXIT_USAGE
    variants = ABLATIONS[table_name]
    if args.variants:
        names = [v.strip() for v in args.variants.split(",")]
        unknown = [n for n in names if n not in variants]
        if unknown:
            _err(f"unknown variants {unknown}; {table_name} has {list(variants)}")
            return EXIT_USAGE
        variants = {n: variants[n] for n in names}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ablate(cfg.train, variants, cfg.seed_list, cfg.n_eval, cfg.iou, cfg.score_thresh, log=print)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "ap3d_car", "accuracy", "s_app"])
        for row in table.rows:
            for i, seed in enumerate(table.seeds):
                s_app = row.s_app[i] if i < len(row.s_app) else float("nan")
                w.writerow([row.name, seed, repr(row.per_seed[i]), repr(row.accuracy[i]), repr(s_app)])
    print(f"\n{table.metric}")
    print(f"{'variant':<14}{'mean':>8}{'std':>8}")
    for row in table.rows:
        print(f"{row.name:<14}{row.mean:>8.4f}{row.std:>8.4f}")
    (out / "config.txt").write_text(format_config(replace(cfg, table=table_name)))
    plot_ablation(table, out / "ablation.png")
    print(f"wrote {out / 'ablation.csv'}, {out / 'ablation.png'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    reports = run_gradcheck(args.seed if args.seed is not None else 0)
    bad = [r.name for r in reports if not r.passed]
    if bad:
        _err(f"gradient mismatch in: {', '.join(bad)}")
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfrnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="KITTI-style AP of a detection directory against ground truth")
    p.add_argument("--gt", help="ground-truth label directory")
    p.add_argument("--det", help="detection result directory (16-field lines; missing scores count as 1.0)")
    p.add_argument("--category", choices=sorted(CATEGORIES), default="car")
    p.add_argument("--iou", type=float, default=None, help="overlap threshold (default: 0.7 car, 0.5 otherwise)")
    p.add_argument("--mode", choices=("r11", "r40"), default="r40")
    p.add_argument("--out", default="out", help="directory for eval_summary.json")
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("toy-train", cmd_toy_train, "train the detector on synthetic scenes"),
                              ("ablate", cmd_ablate, "multi-seed ablation sweep on synthetic scenes")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat dotted-key configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
        p.add_argument("--out", default="out", help="output directory")
        if name == "ablate":
            p.add_argument("--table", default=None, help="table4 | table5 | table6 | table7")
            p.add_argument("--variants", default=None, help="comma-separated subset of the table's rows")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigKeyError as exc:
        _err(f"invalid configuration key {exc.key!r} (line {exc.line})")
        return EXIT_USAGE
    except (ConfigurationError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except ContractError as exc:
        _err(str(exc))
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
