"""Command-line entry point: ``mrmil {gen,train,eval,gradcheck,sweep-r0}``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint, gradcheck
from . import tensor as T
from .config import RunConfig, RunConfigError, load_config
from .data import DataFormatError, Dataset, write_gray, generate, ingest, write_dataset
from .metrics import evaluate
from .model import ConfigError, Model
from .train import TrainingDiverged, train

log = logging.getLogger("mrmil")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
SPLITS = ("train", "val", "test")
HISTORY_COLUMNS = ("epoch", "train_loss", "val_mean_auc", "r_eff", "wall_time")


class UsageError(Exception):
    """Validation failure reported with exit code 1."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _prepare_out(out: str, force: bool, owned: tuple[str, ...]) -> Path:
    if not out:
        raise UsageError("an output directory is required (--out DIR)")
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise UsageError(f"output path exists and is not a directory: {path}")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        for name in owned:
            target = path / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.to_text())


def synthetic_splits(cfg: RunConfig) -> dict[str, Dataset]:
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    return {s: generate(cfg.synthetic_spec(s), sizes[s], name_prefix=f"{s}_") for s in SPLITS}


def _load_split(root: Path, split: str, cfg: RunConfig) -> Dataset:
    directory = root / split
    if not directory.is_dir():
        raise UsageError(f"dataset split not found: {directory}")
    return ingest(directory, input_size=cfg.image_size)


def load_splits(cfg: RunConfig, splits=SPLITS) -> dict[str, Dataset]:
    if cfg.data:
        root = Path(cfg.data)
        return {s: _load_split(root, s, cfg) for s in splits}
    data = synthetic_splits(cfg)
    return {s: data[s] for s in splits}


def _resolve_eval_data(path: Path, cfg: RunConfig) -> Dataset:
    """A split directory (has labels.csv) or a dataset root (uses its test split)."""
    if (path / "labels.csv").is_file():
        return ingest(path, input_size=cfg.image_size)
    return _load_split(path, "test", cfg)


def write_history(history, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_mean_auc), repr(rec.r_eff),
                        repr(rec.wall_time)])


def run_training(cfg: RunConfig, out: Path) -> Model:
    data = load_splits(cfg, ("train", "val"))
    model = Model(cfg.model_config(data["train"].num_classes))
    log.info("model: %d parameters", model.num_parameters())
    result = train(model, data["train"], data["val"], cfg.train_config())
    write_history(result.history, out / "history.csv")
    checkpoint.save(model, out / "checkpoint.bin",
                    extra={"best_epoch": result.best_epoch, "steps": result.steps})
    log.info("best epoch %d, validation mean AUC %.4f", result.best_epoch, result.best_val_auc)
    return model


def run_evaluation(model: Model, ds: Dataset, cfg: RunConfig, out: Path, export_saliency: bool = True):
    if ds.num_classes != model.config.num_classes:
        raise UsageError(f"checkpoint has {model.config.num_classes} classes, dataset has {ds.num_classes}")
    size = ds[0].image.shape[0]
    if size != model.config.input_size:
        raise UsageError(f"checkpoint expects {model.config.input_size}px inputs, dataset has {size}px")
    P, S = model.predict(ds.images())
    report = evaluate(P, S, ds, taus=cfg.taus, alphas=cfg.alphas, rule=cfg.iobb_rule)
    labels = ds.labels()
    for k, name in enumerate(ds.class_names):
        if k not in report.auc:
            print(f"AUC not computed for class {name!r}: its labels contain a single class "
                  f"({int(labels[:, k].sum())} of {len(ds)} positive)", file=sys.stderr)
    report.to_csv(out / "metrics.csv")
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample"] + [f"p_{n}" for n in ds.class_names])
        for s, row in zip(ds.samples, P):
            w.writerow([s.name] + [repr(float(v)) for v in row])
    if export_saliency:
        sal = out / "saliency"
        sal.mkdir(exist_ok=True)
        for i, s in enumerate(ds.samples):
            for k, name in enumerate(ds.class_names):
                write_gray(sal / f"{s.name}_{name}.pgm", S[i, k])
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg.out, args.force, SPLITS + ("config.txt",))
    _write_config(cfg, out)
    for split, ds in synthetic_splits(cfg).items():
        write_dataset(ds, out / split)
        counts = ", ".join(f"{n}={c}" for n, c in zip(ds.class_names, ds.positive_counts()))
        print(f"{split}: {len(ds)} samples, positives {counts}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg.out, args.force, ("config.txt", "history.csv", "checkpoint.bin"))
    _write_config(cfg, out)
    try:
        run_training(cfg, out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint PATH")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if not cfg.data:
        raise UsageError("eval needs a dataset (--data DIR)")
    out = _prepare_out(cfg.out, args.force, ("config.txt", "metrics.csv", "predictions.csv", "saliency"))
    model = checkpoint.load(ckpt)
    cfg = cfg.with_updates({"image_size": str(model.config.input_size)})
    _write_config(cfg, out)
    ds = _resolve_eval_data(Path(cfg.data), cfg)
    run_evaluation(model, ds, cfg, out)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    seeds = args.seeds
    if args.corrupt:
        with T.corrupt_gradient(args.corrupt):
            results = gradcheck.run_all(seeds)
    else:
        results = gradcheck.run_all(seeds)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  skipped {r.skipped}/{r.total} kink-crossing coordinates" if r.total else ""
        print(f"{status} {r.op:<22} worst relative error {r.worst:.3e}{extra}")
        if not r.passed:
            failed.append(r.op)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _sweep_one(cfg: RunConfig, r0: float, out: Path) -> list[list]:
    with threadpool_limits(1):
        run_cfg = cfg.with_updates({"r0": repr(float(r0)), "out": str(out)})
        out.mkdir(parents=True, exist_ok=True)
        _write_config(run_cfg, out)
        model = run_training(run_cfg, out)
        test = load_splits(run_cfg, ("test",))["test"]
        report = run_evaluation(model, test, run_cfg, out, export_saliency=False)
    rows = []
    for k, name in enumerate(report.class_names):
        rows.append([repr(float(r0)), name, repr(report.auc.get(k, float("nan"))),
                     repr(report.dice.get(k, float("nan"))), repr(report.activated_area.get(k, float("nan"))),
                     report.area_n.get(k, 0)])
    return rows


def cmd_sweep_r0(cfg: RunConfig, args) -> int:
    r0_list = cfg.r0_list
    names = tuple(f"r0_{float(r):g}" for r in r0_list)
    out = _prepare_out(cfg.out, args.force, ("config.txt", "sweep.csv") + names)
    _write_config(cfg, out)
    jobs = [(cfg, r0, out / name) for r0, name in zip(r0_list, names)]
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                groups = list(pool.map(_sweep_one, *zip(*jobs)))
        else:
            groups = [_sweep_one(*job) for job in jobs]
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r0", "class", "auc", "dice", "activated_area", "n_positive"])
        for rows in groups:
            w.writerows(rows)
    for rows in groups:
        for r0, name, auc, dice, area, _ in rows:
            print(f"r0={float(r0):g} {name}: auc {float(auc):.4f} dice {float(dice):.4f} "
                  f"activated_area {float(area):.4f}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "sweep-r0": cmd_sweep_r0}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrmil", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--data", help="dataset directory")
    parser.add_argument("--checkpoint", help="checkpoint file (eval)")
    parser.add_argument("--tau", help="comma-separated binarization thresholds (eval)")
    parser.add_argument("--alpha", help="comma-separated IoBB acceptance levels (eval)")
    parser.add_argument("--r0", help="comma-separated r0 values (sweep-r0)")
    parser.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel runs for sweep-r0")
    parser.add_argument("--seeds", type=int, default=5, help="seeds per gradient check")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--corrupt", help=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    for flag, key in (("seed", "seed"), ("out", "out"), ("data", "data"), ("tau", "taus"),
                      ("alpha", "alphas"), ("r0", "r0_list")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = resolve_config(args)
        with threadpool_limits(1):
            return COMMANDS[args.command](cfg, args)
    except (UsageError, RunConfigError, ConfigError, DataFormatError, FileNotFoundError,
            checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
