"""Command-line entry point: data generation, pursuit, training, evaluation,
denoising, and the dictionary-distance metric.

Every subcommand is config-file-first: settings come from built-in defaults,
overlaid by the JSON config (--config), overlaid by explicit flags. Each run
writes the fully resolved settings next to its outputs, so an experiment can
be replayed from the snapshot alone. Exit codes: 0 success, 2 validation
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import NotPositiveDefinite, RankDeficientSupport
from .imaging import (
    DenoiserModel,
    ImagingTrainConfig,
    denoise,
    load_image,
    psnr,
    sample_crops,
    save_image,
    train_image_denoiser,
)
from .linalg import load_matrix
from .pursuit import (
    EXACT_CARDINALITY,
    THRESHOLD_OR_MAX,
    CscDictionary,
    Dictionary,
    PursuitConfig,
    RandConfig,
    batch_omp,
    gcmp,
    mp,
    omp,
    rand_omp,
    sp,
)
from .synthetic import (
    NOISE_LEVELS,
    EvalContext,
    SyntheticSpec,
    _run_method,
    dictionary_distance,
    gen_dataset,
    load_dataset,
    make_dct_dictionary,
    save_dataset,
    write_results_csv,
)
from .training import AdamConfig, LossConfig, TrainConfig, train
from .unrolled import (
    LgmParams,
    ListaParams,
    load_lgm_checkpoint,
    load_lista_checkpoint,
    save_lgm_checkpoint,
    save_lista_checkpoint,
)

_VALIDATION_ERRORS = (ValueError, TypeError, KeyError, OSError)
_NUMERICAL_ERRORS = (NotPositiveDefinite, RankDeficientSupport)

_PURSUIT_ALGOS = ("omp", "mp", "sp", "batch-omp", "rand-omp", "gcmp")


def _read_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return config


def _resolve(defaults: dict, config: dict, overrides: dict) -> dict:
    for key in config:
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
    settings = dict(defaults)
    settings.update(config)
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return settings


def _write_resolved(settings: dict, target: Path) -> None:
    """Snapshot next to the outputs: inside a directory target, or as
    <stem>.resolved.json beside a file target."""
    if target.is_dir():
        path = target / "resolved_config.json"
    else:
        path = target.with_name(target.stem + ".resolved.json")
    with open(path, "w") as fh:
        json.dump(settings, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _threads(value) -> int:
    if value is None:
        return os.cpu_count() or 1
    if value < 1:
        raise ValueError(f"--threads must be >= 1, got {value}")
    return value


def _parallel_map(fn, items, workers: int):
    """Order-preserving map over independent work items."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _fmt(value: float) -> str:
    return f"{value:.9g}"


# ---------------------------------------------------------------------------
# gen-data

_GEN_DEFAULTS = {
    "n": 100,
    "m": 400,
    "cardinalities": [10],
    "signals_per_cardinality": 10000,
    "sigmas": list(NOISE_LEVELS),
    "seed": 0,
}


def _cmd_gen_data(args) -> int:
    overrides = {
        "n": args.n, "m": args.m,
        "cardinalities": [int(c) for c in args.cardinalities.split(",")]
        if args.cardinalities else None,
        "signals_per_cardinality": args.signals,
        "sigmas": [float(s) for s in args.sigmas.split(",")] if args.sigmas else None,
        "seed": args.seed,
    }
    settings = _resolve(_GEN_DEFAULTS, _read_config(args.config), overrides)
    spec = SyntheticSpec(settings["n"], settings["m"],
                         tuple(settings["cardinalities"]),
                         settings["signals_per_cardinality"],
                         tuple(settings["sigmas"]), settings["seed"])
    d_true = make_dct_dictionary(spec.n, spec.m)
    datasets = gen_dataset(spec, d_true)
    out = Path(args.out)
    save_dataset(out, spec, d_true, datasets)
    _write_resolved(settings, out)
    print(f"wrote {spec.n_signals} signals at {len(spec.sigmas)} noise "
          f"level(s) to {out}")
    return 0


# ---------------------------------------------------------------------------
# pursuit

def _pursuit_row(index, x, result):
    support = list(result.code.support)
    coeffs = list(np.atleast_1d(result.code.coeffs))
    residual = float(np.linalg.norm(x - result.reconstruction))
    return [index, result.code.cardinality, result.iterations, _fmt(residual),
            int(getattr(result, "hit_iteration_cap", False)),
            " ".join(str(int(i)) for i in support),
            " ".join(_fmt(float(c)) for c in coeffs)]


def _cmd_pursuit(args) -> int:
    if args.algo not in _PURSUIT_ALGOS:
        raise ValueError(f"unknown algorithm {args.algo!r}, "
                         f"expected one of {_PURSUIT_ALGOS}")
    atoms = load_matrix(args.dict)
    signals = load_matrix(args.signals)
    if signals.ndim != 2:
        raise ValueError(f"signals file must hold a matrix, got {signals.shape}")
    mode = EXACT_CARDINALITY if args.exact else THRESHOLD_OR_MAX
    config = PursuitConfig(args.s, args.eps, mode)
    workers = _threads(args.threads)

    if args.algo == "gcmp":
        csc = CscDictionary(atoms, signals.shape[0])
        runner = lambda j: gcmp(csc, signals[:, j], config)
    else:
        dictionary = Dictionary(atoms)
        if args.algo == "omp":
            runner = lambda j: omp(dictionary, signals[:, j], config)
        elif args.algo == "mp":
            runner = lambda j: mp(dictionary, signals[:, j], config)
        elif args.algo == "sp":
            runner = lambda j: sp(dictionary, signals[:, j], args.s)
        else:
            runner = lambda j: rand_omp(
                dictionary, signals[:, j], config,
                RandConfig(args.tau, args.draws, args.seed + j))

    if args.algo == "batch-omp":
        results = batch_omp(Dictionary(atoms), signals, config)
    else:
        results = _parallel_map(runner, range(signals.shape[1]), workers)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("signal", "cardinality", "iterations", "residual",
                         "hit_cap", "support", "coeffs"))
        for j, result in enumerate(results):
            writer.writerow(_pursuit_row(j, signals[:, j], result))
    _write_resolved({"algo": args.algo, "dict": args.dict, "signals": args.signals,
                     "s": args.s, "eps": args.eps, "exact": bool(args.exact),
                     "tau": args.tau, "draws": args.draws, "seed": args.seed},
                    out)
    print(f"coded {signals.shape[1]} signal(s) with {args.algo} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train

_TRAIN_DEFAULTS = {
    "kind": "lgm",
    "epochs": 20,
    "learning_rate": None,  # per-kind default below
    "batch_size": None,
    "loss": None,
    "xi": None,
    "seed": 0,
    "max_cardinality": 0,  # 0: the dataset's true cardinality
    "residual_threshold": 0.0,
    "exact_cardinality": True,
    "decay_factor": 0.5,
    "decay_every": 0,
    "tau_factor": 0.8,
    "draws": 5,
    "include_map": True,
    "iterations": 7,
    "theta0": 0.01,
    "init": "random",
    "init_seed": 0,
    "init_atoms": 0,  # 0: same atom count as the generating dictionary
    "sigma": None,  # default: lowest noise level in the dataset
    # denoiser-only settings
    "patch_size": 8,
    "max_atoms": 10,
    "dc_scale": 2.5,
    "crop_size": 100,
    "crops": 432,
    "images": None,
}

_KIND_LR = {"lgm": 0.002, "lgm-mmse": 0.01, "lmp": 0.002, "lista": 1e-5,
            "denoiser": 0.002}
_KIND_BATCH = {"denoiser": 8}
_KIND_LOSS = {"denoiser": "log-sum-l2"}
_KIND_XI = {"denoiser": 1e-5}


def _train_denoiser(settings, args, out: Path) -> int:
    images_dir = args.images or settings["images"]
    if images_dir is None:
        raise ValueError("denoiser training needs --images (folder of PGM files)")
    paths = sorted(Path(images_dir).glob("*.pgm"))
    if not paths:
        raise ValueError(f"no .pgm images under {images_dir}")
    images = [load_image(p) for p in paths]
    crops = sample_crops(images, settings["crop_size"], settings["crops"],
                         settings["seed"])
    model = DenoiserModel.init(settings["patch_size"], settings["max_atoms"],
                               settings["dc_scale"], settings["init_seed"])
    if settings["sigma"] is None:
        raise ValueError("denoiser training needs sigma (pixel-scale noise level)")
    config = ImagingTrainConfig(
        sigma=settings["sigma"], epochs=settings["epochs"],
        batch_size=settings["batch_size"], learning_rate=settings["learning_rate"],
        loss_kind=settings["loss"], xi=settings["xi"],
        decay_factor=settings["decay_factor"], decay_every=settings["decay_every"],
        seed=settings["seed"])
    rows = []

    def progress(epoch, row):
        rows.append({"epoch": epoch, **row})
        print(f"epoch {epoch}: train_loss={row['train_loss']:.6g}")

    model, _ = train_image_denoiser(model, crops, config, callback=progress)
    model.save(out / "model.ckpt")
    with open(out / "run.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "train_loss"))
        for row in rows:
            writer.writerow((row["epoch"], repr(row["train_loss"])))
    print(f"saved denoiser to {out / 'model.ckpt'}")
    return 0


def _cmd_train(args) -> int:
    overrides = {
        "kind": args.kind, "epochs": args.epochs, "learning_rate": args.lr,
        "batch_size": args.batch_size, "loss": args.loss, "xi": args.xi,
        "seed": args.seed, "max_cardinality": args.s,
        "residual_threshold": args.eps, "sigma": args.sigma,
        "iterations": args.iterations, "images": args.images,
    }
    if args.exact is not None:
        overrides["exact_cardinality"] = args.exact
    settings = _resolve(_TRAIN_DEFAULTS, _read_config(args.config), overrides)
    kind = settings["kind"]
    for key, table in (("learning_rate", _KIND_LR), ("batch_size", _KIND_BATCH),
                       ("loss", _KIND_LOSS), ("xi", _KIND_XI)):
        if settings[key] is None:
            settings[key] = table.get(kind, {"batch_size": 50, "loss": "sum-l2",
                                             "xi": 5e-5}.get(key))
    if settings["learning_rate"] is None:
        raise ValueError(f"unknown model kind {kind!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if kind == "denoiser":
        code = _train_denoiser(settings, args, out)
        _write_resolved(settings, out)
        return code

    if args.data is None:
        raise ValueError("training needs --data (a gen-data output directory)")
    spec, d_true, datasets = load_dataset(args.data)
    sigma = settings["sigma"] if settings["sigma"] is not None else min(datasets)
    if sigma not in datasets:
        raise ValueError(f"dataset has no noise level {sigma}, "
                         f"choose from {sorted(datasets)}")
    train_set = datasets[sigma]
    test_set = None
    if args.test_data is not None:
        _, _, test_sets = load_dataset(args.test_data)
        if sigma not in test_sets:
            raise ValueError(f"test dataset has no noise level {sigma}")
        test_set = test_sets[sigma]

    cardinality = settings["max_cardinality"] or spec.cardinalities[0]
    m_init = settings["init_atoms"] or spec.m
    if settings["init"] == "dct":
        d0 = make_dct_dictionary(spec.n, m_init)
    elif settings["init"] == "random":
        rng = np.random.default_rng(settings["init_seed"])
        d0 = rng.standard_normal((spec.n, m_init))
        d0 /= np.sqrt(np.sum(d0 * d0, axis=0))
    else:
        raise ValueError(f"unknown init {settings['init']!r}, use random or dct")

    mode = EXACT_CARDINALITY if settings["exact_cardinality"] else THRESHOLD_OR_MAX
    config = TrainConfig(
        kind=kind, epochs=settings["epochs"],
        adam=AdamConfig(settings["learning_rate"],
                        decay_factor=settings["decay_factor"],
                        decay_every=settings["decay_every"]),
        loss=LossConfig(settings["loss"], settings["xi"]),
        batch_size=settings["batch_size"], seed=settings["seed"],
        max_cardinality=cardinality,
        residual_threshold=settings["residual_threshold"], stop_mode=mode,
        rand=RandConfig(settings["tau_factor"], settings["draws"], settings["seed"]),
        include_map=settings["include_map"])

    if kind == "lista":
        model = ListaParams.init(d0, settings["iterations"], settings["theta0"])
    else:
        model = LgmParams(Dictionary(d0.copy()), Dictionary(d0.copy()))

    def progress(epoch, row):
        print(f"epoch {epoch}: train_loss={row['train_loss']:.6g} "
              f"test_mse={row['test_mse']:.6g} card={row['mean_cardinality']:.3g} "
              f"dist={row['dict_distance']:.6g}")

    run = train(model, config, train_set, test_set, reference=d_true,
                callback=progress)
    run.write_csv(out / "run.csv")
    if kind == "lista":
        save_lista_checkpoint(out / "model.ckpt", run.params)
    else:
        save_lgm_checkpoint(out / "model.ckpt", run.params, run.attention)
    _write_resolved(settings, out)
    print(f"trained {kind} for {run.epochs_completed} epoch(s) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _cmd_eval(args) -> int:
    spec, d_true, datasets = load_dataset(args.data)
    if args.sigmas:
        keep = {float(s) for s in args.sigmas.split(",")}
        missing = keep - set(datasets)
        if missing:
            raise ValueError(f"dataset has no noise level(s) {sorted(missing)}")
        datasets = {s: d for s, d in datasets.items() if s in keep}
    methods = [m for m in args.methods.split(",") if m]
    context = EvalContext(
        dictionary=Dictionary(d_true),
        cardinality=args.cardinality or spec.cardinalities[0],
        max_cardinality=args.max_cardinality or 0,
        eps_factor=args.eps_factor,
        rand=RandConfig(args.tau, args.draws, args.seed),
        include_map=not args.no_map)
    if args.lgm is not None:
        params, attention, _ = load_lgm_checkpoint(args.lgm)
        context.lgm_params = params
        context.lgm_attention = attention
    if args.lista is not None:
        context.lista_params, _ = load_lista_checkpoint(args.lista)

    names = list(dict.fromkeys(methods))
    if "oracle" not in names:
        names.append("oracle")
    cells = [(sigma, name) for sigma in sorted(datasets) for name in names]

    def run_cell(cell):
        sigma, name = cell
        recons, cards = _run_method(name, datasets[sigma], context)
        diffs = recons - datasets[sigma].clean
        return {"method": name, "sigma": sigma,
                "mse": float(np.mean(np.sum(diffs * diffs, axis=0))),
                "card_mean": float(np.mean(cards)),
                "card_std": float(np.std(cards))}

    rows = _parallel_map(run_cell, cells, _threads(args.threads))
    out = Path(args.out)
    write_results_csv(rows, out)
    _write_resolved({"data": args.data, "methods": names,
                     "sigmas": sorted(datasets), "cardinality": context.cardinality,
                     "max_cardinality": args.max_cardinality,
                     "eps_factor": args.eps_factor, "tau": args.tau,
                     "draws": args.draws, "seed": args.seed,
                     "include_map": not args.no_map,
                     "lgm": args.lgm, "lista": args.lista}, out)
    for row in rows:
        print(f"{row['method']:>16s} sigma={row['sigma']:g} "
              f"mse={row['mse']:.6g} card={row['card_mean']:.3g}"
              f"+-{row['card_std']:.3g}")
    return 0


# ---------------------------------------------------------------------------
# denoise

def _cmd_denoise(args) -> int:
    model = DenoiserModel.load(args.model)
    noisy = load_image(args.input)
    result = denoise(model, noisy, args.sigma)
    out = Path(args.out)
    save_image(out, result)
    lines = [("file", str(args.input))]
    if args.clean is not None:
        clean = load_image(args.clean)
        psnr_in = psnr(noisy, clean)
        psnr_out = psnr(result, clean)
        lines += [("psnr_in", _fmt(psnr_in)), ("psnr_out", _fmt(psnr_out))]
        print(f"PSNR {psnr_in:.4f} dB -> {psnr_out:.4f} dB")
    if args.report is not None:
        report = Path(args.report)
        report.parent.mkdir(parents=True, exist_ok=True)
        with open(report, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([k for k, _ in lines])
            writer.writerow([v for _, v in lines])
    _write_resolved({"model": args.model, "input": str(args.input),
                     "out": str(out), "sigma": args.sigma,
                     "clean": args.clean, "report": args.report}, out)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# dict-dist

def _cmd_dict_dist(args) -> int:
    d_true = load_matrix(args.true_dict)
    d_approx = load_matrix(args.approx_dict)
    print(dictionary_distance(d_true, d_approx))
    return 0


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="greedylearn",
        description="Greedy pursuit, unrolled network training, and denoising.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--cardinalities", help="comma-separated cardinalities")
    p.add_argument("--signals", type=int, help="signals per cardinality")
    p.add_argument("--sigmas", help="comma-separated noise levels")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pursuit", help="run a pursuit engine over signals")
    p.add_argument("--algo", required=True, help="|".join(_PURSUIT_ALGOS))
    p.add_argument("--dict", required=True, help="dictionary matrix base path")
    p.add_argument("--signals", required=True, help="signals matrix base path")
    p.add_argument("--s", type=int, required=True, help="cardinality bound")
    p.add_argument("--eps", type=float, default=0.0, help="residual threshold")
    p.add_argument("--exact", action="store_true",
                   help="stop at exactly s atoms instead of threshold-or-max")
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--draws", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True, help="result CSV path")
    p.set_defaults(func=_cmd_pursuit)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--test-data", help="held-out dataset directory")
    p.add_argument("--images", help="folder of PGM images (denoiser training)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", help="lgm | lgm-mmse | lmp | lista | denoiser")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--loss", help="sum-l2 | log-sum-l2")
    p.add_argument("--xi", type=float)
    p.add_argument("--s", type=int, help="max cardinality / unrolling depth")
    p.add_argument("--eps", type=float, help="residual stopping threshold")
    p.add_argument("--exact", type=int, choices=(0, 1),
                   help="1: stop at exactly s atoms")
    p.add_argument("--sigma", type=float, help="noise level to train against")
    p.add_argument("--iterations", type=int, help="lista iteration count")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="compare methods on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--methods", required=True, help="comma-separated method names")
    p.add_argument("--sigmas", help="subset of noise levels")
    p.add_argument("--cardinality", type=int)
    p.add_argument("--max-cardinality", type=int)
    p.add_argument("--eps-factor", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--draws", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-map", action="store_true",
                   help="drop the deterministic run from mmse averages")
    p.add_argument("--lgm", help="lgm checkpoint path")
    p.add_argument("--lista", help="lista checkpoint path")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True, help="result CSV path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("denoise", help="denoise a PGM image")
    p.add_argument("--model", required=True, help="denoiser checkpoint")
    p.add_argument("--input", required=True, help="noisy PGM image")
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--sigma", type=float, help="noise level tag (bookkeeping)")
    p.add_argument("--clean", help="clean reference for PSNR")
    p.add_argument("--report", help="PSNR CSV path")
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("dict-dist", help="distance between two dictionaries")
    p.add_argument("true_dict", help="reference dictionary matrix base path")
    p.add_argument("approx_dict", help="compared dictionary matrix base path")
    p.set_defaults(func=_cmd_dict_dist)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
