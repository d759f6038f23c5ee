"""Command-line front-end.

    cdcm build-data   split manifests and synthetic slice datasets
    cdcm train        single / multi-seed runs or patient-level double CV
    cdcm evaluate     metrics and prediction histograms for a trained run
    cdcm compare      Friedman test + Bonferroni-Dunn CD diagram from a CSV
    cdcm report       collect evaluated runs into a block x treatment table

Exit codes: 0 success, 2 configuration error, 3 training abort.
"""

import argparse
import json
import logging
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import stats
from .config import CIFAR_ENV, ExperimentConfig, field_docs
from .data import (
    DatasetSplit,
    SliceSource,
    build_modified_cifar10,
    generate_synthetic_ppmr,
    load_cifar10,
    load_slice_dataset,
    plan_double_cv,
    plan_modified_cifar10,
)
from .data.cifar import N_CLASSES
from .data.ppmr import build_manifest, write_manifest
from .errors import ConfigurationError, TrainingAborted
from .evaluation import (
    REPORT_METRICS,
    MetricsReport,
    aggregate_runs,
    evaluate_scores,
    prediction_histogram,
    score_subset,
    threshold_for,
    write_histogram,
    write_metrics,
)
from .losses import LossFamily
from .models import build_model, load_checkpoint
from .training import run_double_cv, run_multi_seed

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
SCHEDULE_NOTES = {
    "validation_cadence": "once per epoch",
    "patience_unit": "optimizer iterations",
    "no_decrease": "strict (val loss must drop below the best so far)",
    "best_so_far_across_decays": "kept (not reset after a decay)",
    "checkpoint_metric": "best validation AUCROC",
}

log = logging.getLogger("cdcm")


# -- helpers ----------------------------------------------------------------
def _normal_classes(text):
    out = []
    for tok in str(text).split(","):
        try:
            k = int(tok)
        except ValueError:
            raise ConfigurationError("normal-class must be in 0..9") from None
        if not 0 <= k < N_CLASSES:
            raise ConfigurationError("normal-class must be in 0..9")
        out.append(k)
    return out


def _dump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _experiment(args) -> ExperimentConfig:
    overrides = {k: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    overrides = {k[4:]: v for k, v in overrides.items()}
    return ExperimentConfig.load(args.config, overrides)


class _SlicePlan:
    def __init__(self, cfg):
        records = load_slice_dataset(cfg.slice_root)
        self.plan = plan_double_cv(records, cfg.data_seed)
        self.source = SliceSource(records)

    def single_split(self):
        # cv = none on slice data: first inner rotation of the first outer fold
        fold = self.plan.outer_folds[0]
        inner = fold.inner_splits[0]
        return DatasetSplit(
            self.source.subset(inner.train_patients, "train"),
            self.source.subset(inner.inner_val_patients, "inner_val"),
            self.source.subset(fold.outer_val_patients, "outer_eval"),
        )


def load_split(cfg: ExperimentConfig) -> DatasetSplit:
    if cfg.dataset == "slices":
        return _SlicePlan(cfg).single_split()
    root = cfg.cifar_path()
    try:
        source = load_cifar10(root)
    except ConfigurationError as exc:
        raise ConfigurationError(f"cifar_root: {exc} (set --cifar-root or ${CIFAR_ENV})") from None
    return build_modified_cifar10(cfg.normal_class, cfg.data_seed, source)


def _builder(cfg):
    mcfg = cfg.model_config()
    return lambda seed: build_model(mcfg, seed=seed)


# -- build-data -------------------------------------------------------------
def cmd_build_data(args):
    out = Path(args.out)
    written = []
    if args.modified_cifar10:
        for k in _normal_classes(args.normal_class):
            m = plan_modified_cifar10(k, args.seed)
            path = out / f"modified_cifar10_class{k}_seed{args.seed}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(m.to_json() + "\n")
            written.append(path)
            print(f"{path}: normal {k}, seen {list(m.seen)}, unseen {list(m.unseen)}, counts {json.dumps(m.counts(), sort_keys=True)}")
    if args.synthetic:
        root = generate_synthetic_ppmr(out / "slices", args.cases, args.controls, args.seed, args.slices_per_patient)
        written.append(root)
        print(f"{root}: synthetic slice dataset ({args.cases} cases, {args.controls} controls)")
    if args.index_slices:
        root = Path(args.index_slices)
        write_manifest(root, build_manifest(root), extra={"generator": "indexed"})
        written.append(root)
        print(f"{root}: manifest rebuilt")
    if not written:
        raise ConfigurationError("build-data needs --modified-cifar10, --synthetic or --index-slices")
    return EXIT_OK


# -- train ------------------------------------------------------------------
def _seed_summary(res, thr):
    return {
        "seed": res.seed,
        "best_val_aucroc": res.best_val_aucroc,
        "best_iteration": res.best_iteration,
        "iterations_per_epoch": res.iterations_per_epoch,
        "epochs_run": len(res.history),
        "stopped_early": res.stopped_early,
        "final_lr": res.final_lr,
        "center_unchanged": res.center_unchanged,
        "initial_param_digest": res.initial_param_digest,
        "schedule_events": res.schedule_events,
        "threshold": thr,
        "wall_time": res.wall_time,
    }


def _train_seeds(cfg, out, seeds):
    split = load_split(cfg)
    loss_cfg, tcfg = cfg.loss_config(), cfg.train_config()
    multi = run_multi_seed(_builder(cfg), split, loss_cfg, tcfg, seeds=seeds, run_dir=out)
    build = _builder(cfg)
    for res in multi.results:
        net = res.restore(build(0))
        train_scores = score_subset(net, split.train, loss_cfg, tcfg.eval_batch_size, tcfg.device) if loss_cfg.family is LossFamily.DEEP_SAD else None
        thr = threshold_for(loss_cfg, train_scores)
        val = evaluate_scores(score_subset(net, split.val, loss_cfg, tcfg.eval_batch_size, tcfg.device), thr)
        summary = _seed_summary(res, thr)
        summary["val_metrics"] = val.to_dict()
        _dump(out / f"seed_{res.seed}" / "result.json", summary)
    for s, report in multi.aborts:
        _dump(out / f"seed_{s}" / "result.json", {"seed": s, "aborted": True, "abort_report": report})


def _spawn_seed(config_path, out, seed):
    cmd = [sys.executable, "-m", "cdcm", "train", "--config", str(config_path), "--only-seed", str(seed), "--out", str(out)]
    return subprocess.run(cmd, capture_output=True, text=True)


def cmd_train(args):
    cfg = _experiment(args)
    out = Path(cfg.out)
    if args.only_seed is not None:
        _train_seeds(cfg, out, [args.only_seed])
        return EXIT_OK
    echo = cfg.write(out / "config.txt")
    loss_cfg = cfg.loss_config()

    if cfg.cv == "double":
        sp = _SlicePlan(cfg)
        _dump(out / "fold_plan.json", sp.plan.to_dict())
        result = run_double_cv(sp.plan, sp.source, _builder(cfg), loss_cfg, cfg.train_config(), seed=cfg.seed, run_dir=out)
        rows = []
        for f in result.folds:
            row = {"outer_fold": f.outer_index, "selected_inner": f.selected_inner}
            row["inner_val_aucroc"] = [r.best_val_aucroc for r in f.inner_results]
            row.update(f.report.to_dict())
            rows.append(row)
        write_metrics(rows, out / "outer_metrics.csv", out / "outer_metrics.json")
        _dump(out / "run.json", {"cv": "double", "summary": result.summary, "schedule": SCHEDULE_NOTES, "access_log": result.access_log})
        print(_format_summary(result.summary))
        return EXIT_OK

    seeds = cfg.seeds()
    if args.jobs > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            procs = list(pool.map(lambda s: _spawn_seed(echo, out, s), seeds))
        for s, p in zip(seeds, procs):
            if p.returncode not in (EXIT_OK, EXIT_ABORT):
                sys.stderr.write(p.stderr)
                raise ConfigurationError(f"seed {s} failed with exit code {p.returncode}")
    else:
        _train_seeds(cfg, out, seeds)

    per_seed = [json.loads((out / f"seed_{s}" / "result.json").read_text()) for s in seeds]
    done = [r for r in per_seed if not r.get("aborted")]
    aborted = [r for r in per_seed if r.get("aborted")]
    summary = {
        "loss": cfg.loss,
        "head": cfg.implied_head.value,
        "threshold": done[0]["threshold"] if done and cfg.loss != "deep_sad" else None,
        "seeds": seeds,
        "aborted_seeds": [r["seed"] for r in aborted],
        "best_val_aucroc": [r["best_val_aucroc"] for r in done],
        "schedule": SCHEDULE_NOTES,
    }
    _dump(out / "run.json", summary)
    print(f"run directory: {out}")
    for r in done:
        print(f"  seed {r['seed']}: best val AUCROC {r['best_val_aucroc']:.4f} at iteration {r['best_iteration']}, threshold {r['threshold']:.4g}")
    if aborted:
        for r in aborted:
            print(f"  seed {r['seed']} aborted: {r['abort_report'].get('report_path', '(no report path)')}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------
def cmd_evaluate(args):
    run = Path(args.run)
    config = run / "config.txt"
    if not config.is_file():
        raise ConfigurationError(f"run: no config echo at {config}")
    cfg = ExperimentConfig.load(config)
    if cfg.cv == "double":
        raise ConfigurationError("run: double-CV runs are evaluated during training (see outer_metrics.csv)")
    ckpts = sorted(run.glob("seed_*/checkpoints/best.pt"))
    if not ckpts:
        raise ConfigurationError(f"run: no checkpoint found under {run}/seed_*/checkpoints/best.pt")
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    bad = [s for s in splits if s not in ("train", "val", "test")]
    if bad:
        raise ConfigurationError(f"splits: unknown split(s) {', '.join(bad)}")
    data = load_split(cfg)
    loss_cfg, tcfg = cfg.loss_config(), cfg.train_config()
    rows = {s: [] for s in splits}
    for ck in ckpts:
        net, meta = load_checkpoint(ck)
        seed_dir = ck.parent.parent
        train_scores = score_subset(net, data.train, loss_cfg, tcfg.eval_batch_size, tcfg.device)
        thr = threshold_for(loss_cfg, train_scores)
        if loss_cfg.family is LossFamily.DEEP_SAD:
            log.info("%s: Deep SAD threshold (95th percentile of training-normal distances) = %.6g", seed_dir.name, thr)
        for s in splits:
            scores = train_scores if s == "train" else score_subset(net, getattr(data, s), loss_cfg, tcfg.eval_batch_size, tcfg.device)
            rep = evaluate_scores(scores, thr)
            row = {"seed_dir": seed_dir.name, "split": s, "loss": cfg.loss, "normal_class": cfg.normal_class}
            row.update(rep.to_dict())
            rows[s].append(row)
            hist = prediction_histogram(scores, thr, bins=args.bins)
            write_histogram(hist, seed_dir / "eval" / f"histogram_{s}.csv", seed_dir / "eval" / f"histogram_{s}.{args.image_format}", title=f"{cfg.loss} {s}")
    summary = {}
    for s in splits:
        write_metrics(rows[s], run / f"metrics_{s}.csv", run / f"metrics_{s}.json")
        reps = [MetricsReport(**{k: r[k] for k in MetricsReport.__dataclass_fields__}) for r in rows[s]]
        summary[s] = aggregate_runs(reps)
        print(f"{s}: {_format_summary(summary[s])}")
    _dump(run / "evaluation_summary.json", {"threshold_rule": loss_cfg.family.value, "splits": summary})
    return EXIT_OK


def _format_summary(summary):
    return ", ".join(f"{m} {summary[m][0]:.4f} +/- {summary[m][1]:.4f}" for m in REPORT_METRICS if m in summary)


# -- compare ----------------------------------------------------------------
def cmd_compare(args):
    m = stats.ScoreMatrix.from_csv(args.csv, block_column=args.block_column)
    stat, p, summary = stats.friedman_test(m, higher_is_better=not args.lower_is_better)
    control = args.control if args.control is not None else m.treatments[0]
    if control not in m.treatments:
        raise ConfigurationError(f"control: {control!r} is not a column of {args.csv}")
    summary = stats.bonferroni_dunn(summary, alpha=args.alpha, control=control)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats.write_summary(summary, out / "stats.json")
    _, table = stats.cd_diagram(summary, out / f"cd_diagram.{args.image_format}")
    (out / "cd_table.txt").write_text(table + "\n")
    print(f"Friedman chi2 = {stat:.4f}, p = {p:.4g} (k = {summary.k}, N = {summary.n_blocks})")
    print(table)
    return EXIT_OK


# -- report -----------------------------------------------------------------
def cmd_report(args):
    """Collect ``metrics_<split>.json`` of several runs into a matrix CSV."""
    cells = {}
    treatments, blocks = [], []
    for run in args.runs:
        run = Path(run)
        path = run / f"metrics_{args.split}.json"
        if not path.is_file():
            raise ConfigurationError(f"runs: {path} not found (run `cdcm evaluate` first)")
        cfg = ExperimentConfig.load(run / "config.txt")
        rows = json.loads(path.read_text())
        t = str(getattr(cfg, args.treatment_field))
        b = str(getattr(cfg, args.block_field))
        if args.per_seed:
            # one block per (block value, seed): raw per-seed input for the rank test
            groups = {f"{b}/{r['seed_dir']}": [r[args.metric]] for r in rows}
        else:
            groups = {b: [r[args.metric] for r in rows]}
        for block, vals in groups.items():
            cells[(block, t)] = (float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
            blocks += [block] if block not in blocks else []
        treatments += [t] if t not in treatments else []
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join([args.block_field] + treatments)]
    for b in blocks:
        lines.append(",".join([b] + [repr(cells[(b, t)][0]) if (b, t) in cells else "" for t in treatments]))
    out.write_text("\n".join(lines) + "\n")
    std_path = out.with_name(out.stem + "_std" + out.suffix)
    std_lines = [lines[0]] + [
        ",".join([b] + [repr(cells[(b, t)][1]) if (b, t) in cells else "" for t in treatments]) for b in blocks
    ]
    std_path.write_text("\n".join(std_lines) + "\n")
    print(f"wrote {out} ({len(blocks)} blocks x {len(treatments)} treatments) and {std_path}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------
def _add_config_flags(p):
    p.add_argument("--config", help="flat key = value experiment file")
    g = p.add_argument_group("config overrides (defaults: see `cdcm train --help`)")
    for name, default, origin, text in field_docs():
        flag = "--" + name.replace("_", "-")
        aliases = [flag] + (["--seeds"] if name == "n_seeds" else [])
        g.add_argument(*aliases, dest="cfg_" + name, default=None, metavar=type(default).__name__.upper(), help=f"{text} (default {default!r}, {origin})")


def build_parser():
    parser = argparse.ArgumentParser(prog="cdcm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="write split manifests / synthetic datasets")
    p.add_argument("--modified-cifar10", action="store_true")
    p.add_argument("--normal-class", default="8", help="class id or comma list (0..9)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthetic", action="store_true", help="generate a synthetic slice dataset")
    p.add_argument("--cases", type=int, default=5)
    p.add_argument("--controls", type=int, default=15)
    p.add_argument("--slices-per-patient", type=int, default=150)
    p.add_argument("--index-slices", metavar="ROOT", help="rebuild the manifest of an existing slice dataset")
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="train one experiment")
    _add_config_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="run seeds as N parallel subprocesses")
    p.add_argument("--only-seed", type=int, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics and histograms for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--splits", default="test")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--image-format", choices=("png", "svg"), default="png")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="Friedman + Bonferroni-Dunn on a block x treatment CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--block-column")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--control", help="treatment compared against (default: first column)")
    p.add_argument("--lower-is-better", action="store_true")
    p.add_argument("--image-format", choices=("png", "svg"), default="svg")
    p.add_argument("--out", default="comparison")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="collect evaluated runs into a comparison CSV")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metric", default="f2", choices=REPORT_METRICS)
    p.add_argument("--block-field", default="normal_class")
    p.add_argument("--treatment-field", default="loss")
    p.add_argument("--per-seed", action="store_true", help="one row per (block, seed) instead of the seed mean")
    p.add_argument("--out", default="report/matrix.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        path = (exc.report or {}).get("report_path")
        print(f"aborted: {exc}" + (f" (report: {path})" if path else ""), file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
