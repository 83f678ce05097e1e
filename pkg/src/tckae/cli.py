"""
Command-line interface.

Subcommands ``synth | tck | train | eval | project | pipeline``. Stages hand
off through files only; every command is deterministic given its flags.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autoencoder as ae_mod
from .errors import DataFormatError, NumericalError
from .evaluation import (EvalReport, auc_roc, f1_score, kernel_pca_project, knn_classify,
                         pca_project, read_reports_json, write_reports_json, write_table)
from .mts import (ImputationMethod, atomic_write_text, concat, drop_sparse, flatten, impute,
                  load_dataset, read_matrix, save_dataset, split_train_test, standardize,
                  write_matrix)
from .synth import SynthConfig, generate
from .tck import TckConfig, fit_tck, kernel_matrix

logger = logging.getLogger("tckae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

IMPUTE_SUFFIX = {"zero": "z", "mean": "m", "locf": "l"}
METHOD_ORDER = ["AE-z", "dkAE-z", "AE-m", "dkAE-m", "AE-l", "dkAE-l", "TCK-i"]

# stage identifiers mixed into derived seeds
_STAGE_CODES = {"synth": 1, "tck": 2, "ae": 3, "init": 4, "shuffle": 5}


def derive_seed(master, stage, run=0):
    """Child seed for ``stage`` and ``run``: first word of SeedSequence([master, code, run])."""
    ss = np.random.SeedSequence([int(master), _STAGE_CODES[stage], int(run)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------

def _load(path):
    ds = load_dataset(path)
    kept = drop_sparse(ds, 2)
    if len(kept) < len(ds):
        logger.warning("dropped %d series with fewer than 2 observations", len(ds) - len(kept))
    return kept


def _split_standardized(ds, train_fraction):
    train, test = split_train_test(ds, train_fraction)
    train_s, stats = standardize(train, train)
    return train_s, stats.apply(test), stats


def _require_labels(ds, what):
    if ds.labels is None:
        raise DataFormatError(f"{what} needs a labelled dataset")


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def cmd_synth(args):
    try:
        cfg = SynthConfig(n=args.n, t=args.t, v=args.v, class_balance=args.balance,
                          separation=args.separation, missing_rate=args.missing,
                          informative_missingness=args.informative, noise_std=args.noise,
                          missing_gap=args.gap, seed=args.seed)
        ds = generate(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_dataset(ds, args.out)
    logger.info("wrote %s", args.out)


# --------------------------------------------------------------------------
# tck
# --------------------------------------------------------------------------

def cmd_tck(args):
    ds = _load(args.data)
    train, test, stats = _split_standardized(ds, args.train_fraction)
    try:
        cfg = TckConfig(max_components=args.components, realizations=args.realizations,
                        min_segment=args.min_segment, min_attributes=args.min_attributes,
                        subsample=args.subsample, em_max_iters=args.em_iters,
                        em_tol=args.em_tol, master_seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    fit_on = concat(train, test) if args.transductive else train
    model = fit_tck(fit_on, cfg, stats=stats, n_jobs=args.jobs)

    out = Path(args.out_dir)
    model.save(out / "model.json")
    K_train = kernel_matrix(model, train)
    write_matrix(K_train, out / "K_train.csv")
    write_matrix(kernel_matrix(model, test, train), out / "K_test_train.csv")
    write_matrix(kernel_matrix(model, test), out / "K_test.csv")
    ev = np.linalg.eigvalsh(K_train)
    logger.info("K_train eigenvalues in [%.3g, %.3g]", ev[0], ev[-1])


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _parse_hidden(text):
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--hidden expects comma-separated integers, got {text!r}") from None
    if not sizes:
        raise UsageError("--hidden needs at least one layer size")
    return sizes


def cmd_train(args):
    if args.lam > 0 and not args.kernel:
        raise UsageError("--lambda > 0 requires --kernel")
    ds = _load(args.data)
    train, test, _ = _split_standardized(ds, args.train_fraction)
    method = ImputationMethod.from_name(args.impute, train)
    X_train = flatten(impute(train, method))
    X_test = flatten(impute(test, method))

    K = None
    if args.lam > 0:
        K = read_matrix(args.kernel)
        if K.shape != (len(X_train), len(X_train)):
            raise DataFormatError(
                f"{args.kernel}: kernel is {K.shape}, expected {len(X_train)} x {len(X_train)}")
    try:
        sizes = ae_mod.mirrored_sizes(X_train.shape[1], _parse_hidden(args.hidden))
        net = ae_mod.init_network(sizes, derive_seed(args.seed, "init"))
        cfg = ae_mod.TrainConfig(lam=args.lam, batch_size=args.batch_size, epochs=args.epochs,
                                 learning_rate=args.lr, seed=derive_seed(args.seed, "shuffle"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    net, history = ae_mod.train(net, X_train, K, cfg, X_val=X_test)

    out = Path(args.out_dir)
    net.save(out / "checkpoint.json", cfg)
    write_matrix(ae_mod.encode(net, X_train), out / "codes_train.csv")
    write_matrix(ae_mod.encode(net, X_test), out / "codes_test.csv")
    atomic_write_text(out / "history.csv", history.to_csv())
    _write_json(out / "summary.json", {
        "test_mse": history.val_recon,
        "train_loss_initial": history.initial_loss,
        "train_loss_last": history.loss[-1] if history.loss else None,
        "imputation": args.impute,
        "lambda": args.lam,
        "layer_sizes": sizes,
        "train_config": asdict(cfg),
    })


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def _run_dirs(template, runs):
    if runs > 1 and "{run}" not in template:
        raise UsageError("--run-dir must contain '{run}' when --runs > 1")
    return [Path(template.format(run=f"{r:02d}")) for r in range(runs)]


def evaluate_run(run_dir, y_train, y_test, k, tck_input):
    """(f1, auc, mse-or-None) for one run directory."""
    if tck_input:
        S = read_matrix(run_dir / "K_test_train.csv")
        if S.shape != (len(y_test), len(y_train)):
            raise DataFormatError(f"{run_dir}: K_test_train is {S.shape}")
        pred, score = knn_classify(np.empty(len(y_train)), y_train, S, k, "precomputed")
        test_mse = None
    else:
        C_train = read_matrix(run_dir / "codes_train.csv")
        C_test = read_matrix(run_dir / "codes_test.csv")
        if len(C_train) != len(y_train) or len(C_test) != len(y_test):
            raise DataFormatError(f"{run_dir}: code rows do not match the split")
        pred, score = knn_classify(C_train, y_train, C_test, k, "euclidean")
        with open(run_dir / "summary.json", encoding="utf-8") as fh:
            test_mse = json.load(fh)["test_mse"]
    return f1_score(y_test, pred), auc_roc(y_test, score), test_mse


def cmd_eval(args):
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    ds = _load(args.data)
    _require_labels(ds, "eval")
    train, test = split_train_test(ds, args.train_fraction)
    method = args.method or ("TCK-i" if args.tck_input else "codes")
    report = EvalReport(method)
    for run_dir in _run_dirs(args.run_dir, args.runs):
        report.add(*evaluate_run(run_dir, train.labels, test.labels, args.k, args.tck_input))
    out = Path(args.out_dir)
    write_reports_json([report], out / "report.json")
    write_table([report], out / "report.csv")


# --------------------------------------------------------------------------
# project
# --------------------------------------------------------------------------

def cmd_project(args):
    M = read_matrix(args.input)
    try:
        if args.mode == "pca":
            proj = pca_project(M, args.dims)
        else:
            proj = kernel_pca_project(M, args.dims)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    coords = proj.coordinates
    if args.data:
        ds = _load(args.data)
        _require_labels(ds, "project --data")
        train, test = split_train_test(ds, args.train_fraction)
        labels = (test if args.split == "test" else train).labels
        if len(labels) != len(coords):
            raise DataFormatError(
                f"{len(coords)} projected rows but {len(labels)} {args.split} labels")
    else:
        labels = np.full(len(coords), -1.0)
    write_matrix(np.column_stack([coords, labels]), args.out)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

PIPELINE_DEFAULTS = {
    "seed": 0,
    "runs": 10,
    "data": None,
    "train_fraction": 0.8,
    # synthetic data
    "n": 600, "t": 20, "v": 10, "class_balance": 0.5, "separation": 0.1,
    "missing_rate": 0.5, "informative_missingness": 0.8, "missing_gap": 0.1,
    "noise_std": 1.0,
    # tck
    "components": 10, "realizations": 10, "min_segment": None, "min_attributes": 2,
    "subsample": 0.8, "em_iters": 20, "em_tol": 1e-5, "transductive": False,
    # autoencoder
    "lambda": 0.5, "epochs": 500, "batch_size": 32, "learning_rate": 1e-3, "hidden": "64,32",
    "sweep": [],
    # eval
    "k": 3,
    "projections": True,
}


def load_pipeline_config(path, overrides):
    cfg = dict(PIPELINE_DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise DataFormatError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise DataFormatError(f"{path}: config must be a flat JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if int(cfg["runs"]) < 1:
        raise UsageError("runs must be >= 1")
    if isinstance(cfg["hidden"], list):
        cfg["hidden"] = ",".join(str(h) for h in cfg["hidden"])
    return cfg


def _ns(**kw):
    return argparse.Namespace(**kw)


def _stage(name, fn, args):
    try:
        fn(args)
    except (UsageError, DataFormatError, NumericalError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


def _train_args(cfg, data, out_dir, lam, impute_name, kernel, seed):
    return _ns(data=data, kernel=kernel, lam=lam, impute=impute_name, hidden=cfg["hidden"],
               epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["learning_rate"],
               seed=seed, train_fraction=cfg["train_fraction"], out_dir=out_dir)


def run_pipeline(cfg, out_dir):
    """Run the full experiment matrix; returns the aggregate reports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed, runs = int(cfg["seed"]), int(cfg["runs"])
    data_path = out / "data.csv"

    if cfg["data"]:
        # copying keeps every downstream stage reading one documented file
        src = Path(cfg["data"])
        if not src.exists():
            raise StageError("ingest", DataFormatError(f"dataset file not found: {src}"))
        if src.resolve() != data_path.resolve():
            shutil.copyfile(src, data_path)
    else:
        _stage("synth", cmd_synth, _ns(
            n=cfg["n"], t=cfg["t"], v=cfg["v"], balance=cfg["class_balance"],
            separation=cfg["separation"], missing=cfg["missing_rate"],
            informative=cfg["informative_missingness"], noise=cfg["noise_std"],
            gap=cfg["missing_gap"], seed=derive_seed(seed, "synth"), out=data_path))

    lambdas = [float(cfg["lambda"])] + [float(l) for l in cfg["sweep"]
                                        if float(l) != float(cfg["lambda"])]
    run_template = str(out / "run{run}")
    for r in range(runs):
        run_dir = Path(run_template.format(run=f"{r:02d}"))
        tck_dir = run_dir / "TCK-i"
        logger.info("run %d/%d: tck", r + 1, runs)
        _stage("tck", cmd_tck, _ns(
            data=data_path, out_dir=tck_dir, train_fraction=cfg["train_fraction"],
            seed=derive_seed(seed, "tck", r), components=cfg["components"],
            realizations=cfg["realizations"], min_segment=cfg["min_segment"],
            min_attributes=cfg["min_attributes"], subsample=cfg["subsample"],
            em_iters=cfg["em_iters"], em_tol=cfg["em_tol"], transductive=cfg["transductive"],
            jobs=1))
        ae_seed = derive_seed(seed, "ae", r)
        for impute_name, suffix in IMPUTE_SUFFIX.items():
            for lam in [0.0] + lambdas:
                name = _method_name(lam, suffix, cfg)
                logger.info("run %d/%d: train %s", r + 1, runs, name)
                _stage("train", cmd_train, _train_args(
                    cfg, data_path, run_dir / name, lam, impute_name,
                    tck_dir / "K_train.csv" if lam > 0 else None, ae_seed))

    reports = {}
    sweep_names = [_method_name(l, s, cfg) for l in lambdas[1:] for s in IMPUTE_SUFFIX.values()]
    names = METHOD_ORDER + sweep_names
    for name in names:
        eval_dir = out / "eval" / name
        _stage("eval", cmd_eval, _ns(
            data=data_path, run_dir=str(Path(run_template) / name), runs=runs,
            method=name, tck_input=(name == "TCK-i"), k=cfg["k"],
            train_fraction=cfg["train_fraction"], out_dir=eval_dir))
        reports[name] = read_reports_json(eval_dir / "report.json")[0]

    main = [reports[n] for n in METHOD_ORDER]
    write_table(main, out / "report.csv")
    write_reports_json(main, out / "report.json")
    if sweep_names:
        dk = [n for n in METHOD_ORDER if n.startswith("dkAE")]
        write_table([reports[n] for n in dk + sweep_names], out / "sweep.csv")

    if cfg["projections"]:
        run0 = Path(run_template.format(run="00"))
        proj = out / "projections"
        common = dict(dims=2, data=data_path, split="test", train_fraction=cfg["train_fraction"])
        _stage("project", cmd_project, _ns(mode="kpca", input=run0 / "TCK-i" / "K_test.csv",
                                           out=proj / "kpca_TCK.csv", **common))
        for name in ("AE-z", "dkAE-z"):
            _stage("project", cmd_project, _ns(mode="pca", input=run0 / name / "codes_test.csv",
                                               out=proj / f"pca_{name}.csv", **common))
    return main


def _method_name(lam, suffix, cfg):
    if lam == 0:
        return f"AE-{suffix}"
    if lam == float(cfg["lambda"]):
        return f"dkAE-{suffix}"
    return f"dkAE-{suffix}@{lam:g}"


def cmd_pipeline(args):
    overrides = {"seed": args.seed, "runs": args.runs, "data": args.data,
                 "epochs": args.epochs, "lambda": args.lam}
    cfg = load_pipeline_config(args.config, overrides)
    reports = run_pipeline(cfg, args.out_dir)
    for r in reports:
        logger.info("%s", r.table_row())


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="tckae", description=__doc__.strip().splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a labelled synthetic dataset")
    d = SynthConfig()
    s.add_argument("--n", type=int, default=d.n, help="number of series")
    s.add_argument("--t", type=int, default=d.t, help="time steps per series")
    s.add_argument("--v", type=int, default=d.v, help="variables per step")
    s.add_argument("--balance", type=float, default=d.class_balance, help="fraction of class 1")
    s.add_argument("--separation", type=float, default=d.separation,
                   help="class shift in level and sinusoid frequency")
    s.add_argument("--missing", type=float, default=d.missing_rate, help="average missing rate")
    s.add_argument("--informative", type=float, default=d.informative_missingness,
                   help="how strongly missing rates differ by class, in [0, 1]")
    s.add_argument("--gap", type=float, default=d.missing_gap,
                   help="class gap in missing rates reached at --informative 1, as a fraction of the feasible maximum")
    s.add_argument("--noise", type=float, default=d.noise_std, help="innovation noise std")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--out", required=True, help="output dataset CSV")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("tck", help="fit the time series cluster kernel and write Gram matrices")
    c = TckConfig()
    t.add_argument("--data", required=True, help="dataset CSV")
    t.add_argument("--out-dir", required=True,
                   help="writes model.json, K_train.csv, K_test_train.csv, K_test.csv")
    t.add_argument("--train-fraction", type=float, default=0.8)
    t.add_argument("--seed", type=int, default=0, help="master seed of the ensemble")
    t.add_argument("--components", type=int, default=c.max_components,
                   help="maximum mixture components C (members use 2..C)")
    t.add_argument("--realizations", type=int, default=c.realizations,
                   help="members per component count")
    t.add_argument("--min-segment", type=int, default=None, help="minimum segment length")
    t.add_argument("--min-attributes", type=int, default=c.min_attributes)
    t.add_argument("--subsample", type=float, default=c.subsample,
                   help="fraction of training series each member fits on")
    t.add_argument("--em-iters", type=int, default=c.em_max_iters)
    t.add_argument("--em-tol", type=float, default=c.em_tol)
    t.add_argument("--transductive", action="store_true",
                   help="fit members on train and test series (labels unused)")
    t.add_argument("--jobs", type=int, default=1, help="threads for member fits")
    t.set_defaults(func=cmd_tck)

    r = sub.add_parser("train", help="train an autoencoder (lambda=0) or kernelized autoencoder")
    r.add_argument("--data", required=True, help="dataset CSV")
    r.add_argument("--kernel", help="K_train.csv from `tck` (required when --lambda > 0)")
    r.add_argument("--lambda", dest="lam", type=float, default=0.5,
                   help="weight of the code loss in [0, 1]")
    r.add_argument("--impute", choices=list(IMPUTE_SUFFIX), default="zero")
    r.add_argument("--hidden", default="64,32",
                   help="encoder layer sizes after the input; the last one is the code size")
    r.add_argument("--epochs", type=int, default=500)
    r.add_argument("--batch-size", type=int, default=32)
    r.add_argument("--lr", type=float, default=1e-3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--train-fraction", type=float, default=0.8)
    r.add_argument("--out-dir", required=True,
                   help="writes checkpoint.json, codes_train.csv, codes_test.csv, history.csv, summary.json")
    r.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="kNN classification of codes or of TCK similarities")
    e.add_argument("--data", required=True, help="labelled dataset CSV")
    e.add_argument("--run-dir", required=True,
                   help="run directory; with --runs > 1 a template containing {run} (00, 01, ...)")
    e.add_argument("--runs", type=int, default=1)
    e.add_argument("--method", help="row label in the report")
    e.add_argument("--tck-input", action="store_true",
                   help="classify with K_test_train.csv similarities instead of codes")
    e.add_argument("--k", type=int, default=3)
    e.add_argument("--train-fraction", type=float, default=0.8)
    e.add_argument("--out-dir", required=True, help="writes report.json and report.csv")
    e.set_defaults(func=cmd_eval)

    j = sub.add_parser("project", help="2-D PCA of codes or kernel PCA of a Gram matrix")
    j.add_argument("--mode", choices=["pca", "kpca"], required=True)
    j.add_argument("--input", required=True, help="codes CSV (pca) or square kernel CSV (kpca)")
    j.add_argument("--dims", type=int, default=2)
    j.add_argument("--data", help="dataset CSV supplying the label column")
    j.add_argument("--split", choices=["train", "test"], default="test")
    j.add_argument("--train-fraction", type=float, default=0.8)
    j.add_argument("-o", "--out", required=True, help="output coordinates CSV (x, y, label)")
    j.set_defaults(func=cmd_project)

    q = sub.add_parser("pipeline", help="synth -> tck -> train x 6 -> eval, over several runs")
    q.add_argument("--config", help="flat JSON config; keys as in PIPELINE_DEFAULTS")
    q.add_argument("--seed", type=int, help="master seed for every stage")
    q.add_argument("--runs", type=int)
    q.add_argument("--data", help="ingest this dataset instead of generating one")
    q.add_argument("--epochs", type=int)
    q.add_argument("--lambda", dest="lam", type=float)
    q.add_argument("--out-dir", required=True)
    q.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"tckae: {exc}", file=sys.stderr)
        return _exit_code(exc.cause)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"tckae: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


def _exit_code(exc):
    if isinstance(exc, (DataFormatError, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (UsageError, ValueError)):
        return EXIT_USAGE
    if isinstance(exc, OSError):
        return EXIT_DATA
    return None


if __name__ == "__main__":
    sys.exit(main())
