"""Synthetic sparse-signal experiments: data, metrics, and method comparison.

Signals are sparse combinations of a known generating dictionary, scaled to
unit sup-norm and corrupted by white Gaussian noise. The evaluation harness
runs the pursuit engines and the learned networks over one or more noise
levels and reports per-method reconstruction error and recovered
cardinality, with the oracle projection always included as the reference
lower bound.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyBatch, ShapeMismatch, UnknownMethod, ZeroAtom
from .linalg import load_matrix, save_matrix
from .pursuit import (
    EXACT_CARDINALITY,
    THRESHOLD_OR_MAX,
    Dictionary,
    PursuitConfig,
    RandConfig,
    mmse_estimate,
    omp,
    oracle_estimate,
)
from .unrolled import (
    AttentionParams,
    LgmParams,
    ListaParams,
    lgm_forward,
    lgm_mmse_forward,
    lista_forward,
)

NOISE_LEVELS = (0.04, 0.06, 0.08, 0.1, 0.12, 0.14)

RESULT_COLUMNS = ("method", "sigma", "mse", "card_mean", "card_std")

METHOD_NAMES = ("omp", "omp-cardinality", "omp-mmse", "oracle",
                "lgm", "lgm-cardinality", "lgm-mmse", "lista")


def make_dct_dictionary(n: int, m: int) -> np.ndarray:
    """Overcomplete cosine dictionary, n rows by m unit-norm columns.

    Column j samples cos(pi * j * (i + 1/2) / m) over rows i; columns past
    the constant one are mean-removed before normalization. At m = n this is
    the classical orthogonal cosine basis.
    """
    if not 1 <= n <= m:
        raise ShapeMismatch(f"need 1 <= n <= m, got n={n}, m={m}")
    rows = np.arange(n, dtype=np.float64) + 0.5
    cols = np.arange(m, dtype=np.float64)
    d = np.cos(np.pi * np.outer(rows, cols) / m)
    d[:, 1:] -= d[:, 1:].mean(axis=0)
    return d / np.sqrt(np.sum(d * d, axis=0))


@dataclass
class SyntheticSpec:
    """Dataset recipe; defaults follow the standard synthetic setup."""

    n: int = 100
    m: int = 400
    cardinalities: tuple[int, ...] = (10,)
    signals_per_cardinality: int = 10000
    sigmas: tuple[float, ...] = NOISE_LEVELS
    seed: int = 0

    def __post_init__(self):
        self.cardinalities = tuple(int(s) for s in self.cardinalities)
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if not 1 <= self.n <= self.m:
            raise ValueError(f"need 1 <= n <= m, got n={self.n}, m={self.m}")
        if not self.cardinalities or any(not 1 <= s <= self.m for s in self.cardinalities):
            raise ValueError(f"cardinalities must lie in [1, {self.m}]")
        if self.signals_per_cardinality < 1:
            raise ValueError("signals_per_cardinality must be >= 1")
        if not self.sigmas or any(not s > 0.0 for s in self.sigmas):
            raise ValueError("every sigma must be > 0")

    @property
    def n_signals(self) -> int:
        return self.signals_per_cardinality * len(self.cardinalities)


@dataclass
class LabeledDataset:
    """Clean/noisy signal pairs with the generating codes.

    Columns are signals; ``codes`` holds the dense true coefficients, so
    ``clean = D_true @ codes`` column by column and the true support of
    signal j is ``support(j)``.
    """

    clean: np.ndarray
    noisy: np.ndarray
    codes: np.ndarray
    sigma: float

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64)
        self.noisy = np.asarray(self.noisy, dtype=np.float64)
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.clean.ndim != 2 or self.clean.shape != self.noisy.shape:
            raise ShapeMismatch(
                f"clean {self.clean.shape} and noisy {self.noisy.shape} must match")
        if self.codes.ndim != 2 or self.codes.shape[1] != self.clean.shape[1]:
            raise ShapeMismatch(
                f"codes {self.codes.shape} must have one column per signal")

    @property
    def signal_length(self) -> int:
        return self.clean.shape[0]

    @property
    def n_signals(self) -> int:
        return self.clean.shape[1]

    def support(self, j: int) -> np.ndarray:
        return np.nonzero(self.codes[:, j])[0]


def gen_dataset(spec: SyntheticSpec, d_true) -> dict[float, LabeledDataset]:
    """One LabeledDataset per noise level, sharing a single clean pool.

    Per signal: a uniform support without replacement, magnitudes uniform in
    (0, 1] with random signs, then the signal and its code are rescaled so
    the clean signal has unit sup-norm. Noise for sigma index k comes from
    its own stream seeded (seed, k), so adding a noise level never perturbs
    the others. Fully deterministic given the seed.
    """
    d = np.asarray(getattr(d_true, "atoms", d_true), dtype=np.float64)
    if d.shape != (spec.n, spec.m):
        raise ShapeMismatch(f"dictionary shape {d.shape} != ({spec.n}, {spec.m})")
    rng = np.random.default_rng(spec.seed)
    total = spec.n_signals
    clean = np.empty((spec.n, total))
    codes = np.zeros((spec.m, total))
    col = 0
    for s in spec.cardinalities:
        for _ in range(spec.signals_per_cardinality):
            support = rng.choice(spec.m, size=s, replace=False)
            magnitudes = 1.0 - rng.random(s)  # uniform in (0, 1]
            signs = np.where(rng.random(s) < 0.5, -1.0, 1.0)
            alpha = signs * magnitudes
            x = d[:, support] @ alpha
            peak = np.max(np.abs(x))
            if peak > 0.0:
                x = x / peak
                alpha = alpha / peak
            codes[support, col] = alpha
            clean[:, col] = x
            col += 1
    out = {}
    for k, sigma in enumerate(spec.sigmas):
        noise_rng = np.random.default_rng((spec.seed, k))
        noisy = clean + sigma * noise_rng.standard_normal(clean.shape)
        out[sigma] = LabeledDataset(clean.copy(), noisy, codes.copy(), sigma)
    return out


def _normalized_columns(matrix, what: str) -> np.ndarray:
    d = np.asarray(getattr(matrix, "atoms", matrix), dtype=np.float64)
    if d.ndim != 2 or d.shape[1] < 1:
        raise ShapeMismatch(f"{what} must be a nonempty matrix, got shape {d.shape}")
    # fsum keeps the norms independent of buffer layout, so equal columns
    # normalize to bitwise-equal unit vectors (vectorized sums do not).
    squares = d * d
    norms = np.array([math.sqrt(math.fsum(squares[:, j].tolist()))
                      for j in range(d.shape[1])])
    if np.any(norms == 0.0):
        raise ZeroAtom(f"{what} atom {int(np.argmin(norms))} has zero norm")
    return d / norms


def dictionary_distance(d_true, d_approx) -> float:
    """Mean over true atoms of 1 minus the best absolute correlation.

    Both dictionaries are column-normalized first, so the result lies in
    [0, 1], is zero on self, and ignores column order and sign flips.
    """
    dt = _normalized_columns(d_true, "true dictionary")
    da = _normalized_columns(d_approx, "approximate dictionary")
    if dt.shape[0] != da.shape[0]:
        raise ShapeMismatch(
            f"dictionaries live in different spaces: {dt.shape[0]} vs {da.shape[0]}")
    # The Gram product only locates each true atom's best match; the distance
    # itself uses 1 - |u.v| = min(|u-v|^2, |u+v|^2) / 2 for unit vectors,
    # which cannot go negative and is exactly zero on an identical column.
    nearest = np.argmax(np.abs(da.T @ dt), axis=0)
    diff = da[:, nearest] - dt
    summ = da[:, nearest] + dt
    gaps = 0.5 * np.minimum(np.sum(diff * diff, axis=0), np.sum(summ * summ, axis=0))
    return float(np.mean(np.minimum(gaps, 1.0)))


# ---------------------------------------------------------------------------
# method comparison

@dataclass
class EvalContext:
    """Everything the named methods need: the generating dictionary and
    stopping data for the pursuit family, trained parameters for the
    learned family.

    ``eps_factor`` scales the residual threshold eps = factor * sigma *
    sqrt(n) used by the threshold-stopped methods; ``max_cardinality`` caps
    them (default: twice the true cardinality).
    """

    dictionary: Dictionary | None = None
    cardinality: int = 0
    max_cardinality: int = 0
    eps_factor: float = 1.0
    rand: RandConfig = field(default_factory=RandConfig)
    include_map: bool = True
    lgm_params: LgmParams | None = None
    lgm_attention: AttentionParams | None = None
    lista_params: ListaParams | None = None

    def cap(self) -> int:
        if self.max_cardinality > 0:
            return self.max_cardinality
        if self.cardinality > 0:
            return 2 * self.cardinality
        raise ValueError("set cardinality or max_cardinality for pursuit evaluation")


def _require(value, method: str, what: str):
    if value is None:
        raise ValueError(f"method {method!r} needs {what} in the evaluation context")
    return value


def _run_method(name: str, dataset: LabeledDataset, ctx: EvalContext):
    """Reconstructions (n, N) and recovered cardinalities (N,) for one method."""
    n, count = dataset.signal_length, dataset.n_signals
    recons = np.empty((n, count))
    cards = np.empty(count)
    eps = ctx.eps_factor * dataset.sigma * math.sqrt(n)

    if name == "lista":
        params = _require(ctx.lista_params, name, "lista_params")
        trace = lista_forward(params, dataset.noisy)
        return trace.output, np.count_nonzero(trace.coeffs, axis=0).astype(np.float64)

    if name in ("omp", "omp-cardinality", "omp-mmse", "oracle"):
        d = _require(ctx.dictionary, name, "the generating dictionary")
        if name == "omp-cardinality":
            cfg = PursuitConfig(ctx.cardinality, 0.0, EXACT_CARDINALITY)
        else:
            cfg = PursuitConfig(ctx.cap(), eps, THRESHOLD_OR_MAX)
        for j in range(count):
            x = dataset.noisy[:, j]
            if name == "oracle":
                support = dataset.support(j)
                recons[:, j] = oracle_estimate(d, support, x)
                cards[j] = len(support)
            elif name == "omp-mmse":
                rand = RandConfig(ctx.rand.tau_factor, ctx.rand.draws, ctx.rand.seed + j)
                dense, recon = mmse_estimate(d, x, cfg, rand, include_map=ctx.include_map)
                recons[:, j] = recon
                cards[j] = np.count_nonzero(dense)
            else:
                result = omp(d, x, cfg)
                recons[:, j] = result.reconstruction
                cards[j] = result.code.cardinality
        return recons, cards

    if name in ("lgm", "lgm-cardinality", "lgm-mmse"):
        params = _require(ctx.lgm_params, name, "lgm_params")
        if name == "lgm-cardinality":
            cfg = PursuitConfig(ctx.cardinality, 0.0, EXACT_CARDINALITY)
        else:
            cfg = PursuitConfig(ctx.cap(), eps, THRESHOLD_OR_MAX)
        for j in range(count):
            x = dataset.noisy[:, j]
            if name == "lgm-mmse":
                rand = RandConfig(ctx.rand.tau_factor, ctx.rand.draws, ctx.rand.seed + j)
                trace = lgm_mmse_forward(params, x, cfg, rand,
                                         include_map=ctx.include_map,
                                         attention=ctx.lgm_attention)
                cards[j] = np.count_nonzero(trace.coeffs)
            else:
                trace = lgm_forward(params, x, cfg, attention=ctx.lgm_attention)
                cards[j] = len(trace.support)
            recons[:, j] = trace.output
        return recons, cards

    raise UnknownMethod(f"unknown method {name!r}, expected one of {METHOD_NAMES}")


def evaluate_methods(datasets, methods, context: EvalContext) -> list[dict]:
    """One result row per (method, sigma): mean reconstruction MSE against
    the clean signals plus mean/std of the recovered cardinality.

    ``datasets`` is a LabeledDataset or a {sigma: LabeledDataset} mapping.
    The oracle row is always appended as the lower-bound reference, whether
    requested or not.
    """
    if isinstance(datasets, LabeledDataset):
        datasets = {datasets.sigma: datasets}
    if not datasets:
        raise EmptyBatch("no datasets to evaluate")
    names = list(dict.fromkeys(methods))
    for name in names:
        if name not in METHOD_NAMES:
            raise UnknownMethod(f"unknown method {name!r}, expected one of {METHOD_NAMES}")
    if "oracle" not in names:
        names.append("oracle")
    rows = []
    for sigma in sorted(datasets):
        dataset = datasets[sigma]
        if dataset.n_signals == 0:
            raise EmptyBatch(f"dataset for sigma={sigma} is empty")
        for name in names:
            recons, cards = _run_method(name, dataset, context)
            diffs = recons - dataset.clean
            rows.append({
                "method": name,
                "sigma": sigma,
                "mse": float(np.mean(np.sum(diffs * diffs, axis=0))),
                "card_mean": float(np.mean(cards)),
                "card_std": float(np.std(cards)),
            })
    return rows


def write_results_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([row["method"], repr(row["sigma"]), repr(row["mse"]),
                             repr(row["card_mean"]), repr(row["card_std"])])


# ---------------------------------------------------------------------------
# dataset storage: matrix payloads plus a JSON manifest

def save_dataset(directory, spec: SyntheticSpec, d_true,
                 datasets: dict[float, LabeledDataset]) -> None:
    """Write the manifest, the generating dictionary, and every payload."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = np.asarray(getattr(d_true, "atoms", d_true), dtype=np.float64)
    save_matrix(directory / "dictionary", d)
    sigma_keys = {}
    sample = next(iter(datasets.values()))
    save_matrix(directory / "clean", sample.clean)
    save_matrix(directory / "codes", sample.codes)
    for k, sigma in enumerate(sorted(datasets)):
        name = f"noisy_{k}"
        save_matrix(directory / name, datasets[sigma].noisy)
        sigma_keys[repr(float(sigma))] = name
    manifest = {
        "spec": {
            "n": spec.n, "m": spec.m,
            "cardinalities": list(spec.cardinalities),
            "signals_per_cardinality": spec.signals_per_cardinality,
            "sigmas": [repr(s) for s in spec.sigmas],
            "seed": spec.seed,
        },
        "dictionary": "dictionary",
        "clean": "clean",
        "codes": "codes",
        "noisy": sigma_keys,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_dataset(directory):
    """Read back (spec, dictionary, {sigma: LabeledDataset})."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    raw = manifest["spec"]
    spec = SyntheticSpec(raw["n"], raw["m"], tuple(raw["cardinalities"]),
                         raw["signals_per_cardinality"],
                         tuple(float(s) for s in raw["sigmas"]), raw["seed"])
    d_true = load_matrix(directory / manifest["dictionary"])
    clean = load_matrix(directory / manifest["clean"])
    codes = load_matrix(directory / manifest["codes"])
    datasets = {}
    for key, name in manifest["noisy"].items():
        sigma = float(key)
        datasets[sigma] = LabeledDataset(clean, load_matrix(directory / name),
                                         codes, sigma)
    return spec, d_true, datasets
