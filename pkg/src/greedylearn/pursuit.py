"""Greedy sparse pursuit over explicit and banded-circulant dictionaries.

All engines share the conventions:

* correlations are norm-weighted, ``u = W_D D^T r`` with ``W_D`` the
  reciprocal atom norms (a designated DC atom gets weight exactly 1);
* argmax ties resolve to the lowest index;
* residual thresholds compare the euclidean norm of the current residual.

Selection is exact and never regularized: a rank-deficient least-squares
step masks the offending atom instead of adding ridge terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyBatch,
    NotPositiveDefinite,
    RankDeficientSupport,
    ShapeMismatch,
    ZeroAtom,
)
from .linalg import chol_solve, cholesky_append, ls_solve

THRESHOLD_OR_MAX = "threshold-or-max"
EXACT_CARDINALITY = "exact-cardinality"

# Residuals at or below 1e-12 * max(1, ||x||) count as exactly recovered.
_ZERO_SCALE = 1e-12


@dataclass
class Dictionary:
    """Explicit dictionary: one atom per column of ``atoms`` (n x m).

    ``dc_index`` marks an optional DC atom whose correlation weight is pinned
    to 1 instead of its reciprocal norm.
    """

    atoms: np.ndarray
    dc_index: int | None = None
    atom_norms: np.ndarray = field(init=False)

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise ShapeMismatch(f"atoms must be 2-D, got shape {self.atoms.shape}")
        if self.dc_index is not None and not 0 <= self.dc_index < self.atoms.shape[1]:
            raise ShapeMismatch(f"dc_index {self.dc_index} out of range")
        self.atom_norms = np.sqrt(np.sum(self.atoms * self.atoms, axis=0))
        if np.any(self.atom_norms == 0.0):
            raise ZeroAtom("dictionary contains a zero atom")

    @property
    def n_features(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """Correlation weights 1/||d_j|| with the DC entry pinned to 1."""
        w = 1.0 / self.atom_norms
        if self.dc_index is not None:
            w = w.copy()
            w[self.dc_index] = 1.0
        return w


@dataclass
class PursuitConfig:
    """Stopping rules shared by the greedy engines.

    ``threshold-or-max`` stops at ``||r|| <= residual_threshold`` or at
    ``max_cardinality`` iterations, whichever first; ``exact-cardinality``
    runs ``max_cardinality`` iterations (early exit only on a numerically
    zero residual).
    """

    max_cardinality: int
    residual_threshold: float = 0.0
    stop_mode: str = THRESHOLD_OR_MAX

    def __post_init__(self):
        if self.max_cardinality < 1:
            raise ValueError(f"max_cardinality must be >= 1, got {self.max_cardinality}")
        if self.residual_threshold < 0.0:
            raise ValueError(f"residual_threshold must be >= 0, got {self.residual_threshold}")
        if self.stop_mode not in (THRESHOLD_OR_MAX, EXACT_CARDINALITY):
            raise ValueError(f"unknown stop_mode {self.stop_mode!r}")


@dataclass
class RandConfig:
    """Randomized-selection knobs: threshold factor, draw count, RNG seed."""

    tau_factor: float = 0.8
    draws: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau_factor <= 1.0:
            raise ValueError(f"tau_factor must lie in (0, 1], got {self.tau_factor}")
        if self.draws < 1:
            raise ValueError(f"draws must be >= 1, got {self.draws}")


@dataclass
class SparseCode:
    """Ordered support with matching coefficients over an ambient dimension."""

    ambient_dim: int
    support: list[int]
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if len(self.support) != self.coeffs.shape[0]:
            raise ShapeMismatch(
                f"support length {len(self.support)} != coeffs length {self.coeffs.shape[0]}")

    @property
    def cardinality(self) -> int:
        return len(set(self.support))

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.ambient_dim)
        np.add.at(dense, np.asarray(self.support, dtype=np.intp), self.coeffs)
        return dense


@dataclass
class PursuitResult:
    """Code + reconstruction + one residual norm per completed iteration."""

    code: SparseCode
    reconstruction: np.ndarray
    residual_norms: list[float]
    iterations: int
    hit_iteration_cap: bool = False


def _check_signal(dictionary, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != dictionary.n_features:
        raise ShapeMismatch(
            f"signal shape {x.shape} incompatible with {dictionary.n_features} features")
    return x


def _check_cardinality(s: int, m: int) -> None:
    if not 1 <= s <= m:
        raise ValueError(f"cardinality {s} must lie in [1, {m}]")


def _empty_result(m: int, n: int) -> PursuitResult:
    return PursuitResult(SparseCode(m, [], np.zeros(0)), np.zeros(n), [], 0)


def _stable_top_k(magnitudes: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest magnitudes, descending, ties to the lowest index."""
    order = np.argsort(-magnitudes, kind="stable")
    return order[:k]


def omp(dictionary: Dictionary, x, config: PursuitConfig) -> PursuitResult:
    """Orthogonal matching pursuit with norm-weighted selection.

    Selected atoms are masked from re-selection. If appending an atom makes
    the support Gram lose positive definiteness, the atom is masked for the
    rest of the call and the next-best candidate is tried; the call only
    fails (RankDeficientSupport) if not even a first atom can be placed.
    """
    x = _check_signal(dictionary, x)
    atoms, w = dictionary.atoms, dictionary.weights
    n, m = atoms.shape
    _check_cardinality(config.max_cardinality, m)
    xnorm = float(np.linalg.norm(x))
    zero_tol = _ZERO_SCALE * max(1.0, xnorm)
    eps = config.residual_threshold if config.stop_mode == THRESHOLD_OR_MAX else None
    if xnorm <= zero_tol or (eps is not None and xnorm <= eps):
        return _empty_result(m, n)

    support: list[int] = []
    blocked = np.zeros(m, dtype=bool)
    factor = np.zeros((0, 0))
    rhs = np.zeros(0)
    coeffs = np.zeros(0)
    recon = np.zeros(n)
    r = x
    res_norms: list[float] = []

    while len(support) < config.max_cardinality:
        u = w * (atoms.T @ r)
        u[blocked] = 0.0
        appended = False
        failed_here = False
        while True:
            i0 = int(np.argmax(np.abs(u)))
            if u[i0] == 0.0:
                break
            sub = atoms[:, support]
            try:
                factor = cholesky_append(factor, sub.T @ atoms[:, i0],
                                         float(atoms[:, i0] @ atoms[:, i0]))
            except NotPositiveDefinite:
                blocked[i0] = True
                u[i0] = 0.0
                failed_here = True
                continue
            appended = True
            break
        if not appended:
            if failed_here and not support:
                raise RankDeficientSupport("no atom admits a positive-definite support Gram")
            break
        support.append(i0)
        blocked[i0] = True
        rhs = np.append(rhs, atoms[:, i0] @ x)
        coeffs = chol_solve(factor, rhs)
        recon = atoms[:, support] @ coeffs
        r = x - recon
        rn = float(np.linalg.norm(r))
        res_norms.append(rn)
        if (eps is not None and rn <= eps) or rn <= zero_tol:
            break

    return PursuitResult(SparseCode(m, support, coeffs), recon, res_norms, len(res_norms))


def mp(dictionary: Dictionary, x, config: PursuitConfig) -> PursuitResult:
    """Matching pursuit: one weighted-correlation peak per iteration, no LS.

    The same atom may be re-selected; its coefficient accumulates, so the
    support stays unique (in first-selection order) and the cardinality is
    at most the iteration count.
    """
    x = _check_signal(dictionary, x)
    atoms, w = dictionary.atoms, dictionary.weights
    n, m = atoms.shape
    _check_cardinality(config.max_cardinality, m)
    xnorm = float(np.linalg.norm(x))
    zero_tol = _ZERO_SCALE * max(1.0, xnorm)
    eps = config.residual_threshold if config.stop_mode == THRESHOLD_OR_MAX else None
    if xnorm <= zero_tol or (eps is not None and xnorm <= eps):
        return _empty_result(m, n)

    order: list[int] = []
    amounts: dict[int, float] = {}
    recon = np.zeros(n)
    r = x
    res_norms: list[float] = []
    for _ in range(config.max_cardinality):
        u = w * (atoms.T @ r)
        i0 = int(np.argmax(np.abs(u)))
        if u[i0] == 0.0:
            break
        step = w[i0] * u[i0]
        if i0 not in amounts:
            order.append(i0)
            amounts[i0] = 0.0
        amounts[i0] += step
        recon = recon + step * atoms[:, i0]
        r = x - recon
        rn = float(np.linalg.norm(r))
        res_norms.append(rn)
        if (eps is not None and rn <= eps) or rn <= zero_tol:
            break

    coeffs = np.array([amounts[i] for i in order])
    return PursuitResult(SparseCode(m, order, coeffs), recon, res_norms, len(res_norms))


def sp(dictionary: Dictionary, x, s: int, max_iterations: int = 50) -> PursuitResult:
    """Subspace pursuit with a fixed target cardinality ``s``.

    Each round unions the support with the ``s`` strongest off-support
    correlations, solves LS on the union, re-prunes to ``s`` by coefficient
    energy ``|a_i| * ||d_i||``, and solves LS again. The loop stops when the
    residual norm stops decreasing (the previous iterate is returned) or
    after ``max_iterations`` rounds, which is reported via
    ``hit_iteration_cap``.
    """
    x = _check_signal(dictionary, x)
    atoms, w = dictionary.atoms, dictionary.weights
    n, m = atoms.shape
    _check_cardinality(s, m)
    xnorm = float(np.linalg.norm(x))
    zero_tol = _ZERO_SCALE * max(1.0, xnorm)
    if xnorm <= zero_tol:
        return _empty_result(m, n)

    norms = dictionary.atom_norms
    u = w * (atoms.T @ x)
    support = list(_stable_top_k(np.abs(u), s))
    coeffs = ls_solve(atoms[:, support], x)
    recon = atoms[:, support] @ coeffs
    prev = float(np.linalg.norm(x - recon))
    res_norms = [prev]
    hit_cap = True

    for _ in range(max_iterations):
        if prev <= zero_tol:
            hit_cap = False
            break
        r = x - recon
        u = w * (atoms.T @ r)
        u[support] = 0.0
        mags = np.abs(u)
        candidates = [int(i) for i in _stable_top_k(mags, s) if mags[i] > 0.0]
        if not candidates:
            hit_cap = False
            break
        union = support + candidates
        trial = ls_solve(atoms[:, union], x)
        keep = _stable_top_k(np.abs(trial) * norms[union], s)
        new_support = [union[int(i)] for i in keep]
        new_coeffs = ls_solve(atoms[:, new_support], x)
        new_recon = atoms[:, new_support] @ new_coeffs
        rn = float(np.linalg.norm(x - new_recon))
        if rn > prev:
            hit_cap = False
            break
        support, coeffs, recon, prev = new_support, new_coeffs, new_recon, rn
        res_norms.append(rn)

    result = PursuitResult(SparseCode(m, [int(i) for i in support], coeffs), recon,
                           res_norms, len(res_norms))
    result.hit_iteration_cap = hit_cap
    return result


def batch_omp(dictionary: Dictionary, signals, config: PursuitConfig) -> list[PursuitResult]:
    """OMP over many signals using a precomputed Gram and progressive Cholesky.

    Correlations are updated as ``p0 - G[:, S] a`` instead of forming
    residuals, and the residual norm is tracked through the identity
    ``||r||^2 = ||x||^2 - b_S^T a_S``. Selections and stops match running
    ``omp`` per column; coefficients agree to LS accuracy.
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2 or signals.shape[0] != dictionary.n_features:
        raise ShapeMismatch(
            f"signals shape {signals.shape} incompatible with {dictionary.n_features} features")
    if signals.shape[1] == 0:
        raise EmptyBatch("batch_omp received zero signals")
    atoms, w = dictionary.atoms, dictionary.weights
    n, m = atoms.shape
    _check_cardinality(config.max_cardinality, m)
    gram = atoms.T @ atoms
    eps = config.residual_threshold if config.stop_mode == THRESHOLD_OR_MAX else None

    results = []
    for col in range(signals.shape[1]):
        x = signals[:, col]
        xnorm = float(np.linalg.norm(x))
        zero_tol = _ZERO_SCALE * max(1.0, xnorm)
        if xnorm <= zero_tol or (eps is not None and xnorm <= eps):
            results.append(_empty_result(m, n))
            continue
        p0 = atoms.T @ x
        support: list[int] = []
        blocked = np.zeros(m, dtype=bool)
        factor = np.zeros((0, 0))
        coeffs = np.zeros(0)
        res_norms: list[float] = []
        resid_sq = xnorm * xnorm
        while len(support) < config.max_cardinality:
            u = p0 - gram[:, support] @ coeffs if support else p0.copy()
            u *= w
            u[blocked] = 0.0
            appended = False
            failed_here = False
            while True:
                i0 = int(np.argmax(np.abs(u)))
                if u[i0] == 0.0:
                    break
                try:
                    factor = cholesky_append(factor, gram[support, i0], float(gram[i0, i0]))
                except NotPositiveDefinite:
                    blocked[i0] = True
                    u[i0] = 0.0
                    failed_here = True
                    continue
                appended = True
                break
            if not appended:
                if failed_here and not support:
                    raise RankDeficientSupport(
                        "no atom admits a positive-definite support Gram")
                break
            support.append(i0)
            blocked[i0] = True
            coeffs = chol_solve(factor, p0[support])
            resid_sq = max(xnorm * xnorm - float(p0[support] @ coeffs), 0.0)
            rn = resid_sq ** 0.5
            res_norms.append(rn)
            if (eps is not None and rn <= eps) or rn <= zero_tol:
                break
        recon = atoms[:, support] @ coeffs if support else np.zeros(n)
        results.append(PursuitResult(SparseCode(m, support, coeffs), recon,
                                     res_norms, len(res_norms)))
    return results


def rand_omp(dictionary: Dictionary, x, config: PursuitConfig,
             rand: RandConfig) -> PursuitResult:
    """OMP with randomized selection.

    Entries below ``tau_factor * max|u|`` are nullified; the surviving
    magnitudes, normalized to a probability distribution, drive a seeded
    draw. Everything else (LS, masking, stopping) matches ``omp``; the same
    seed always reproduces the same result.
    """
    x = _check_signal(dictionary, x)
    atoms, w = dictionary.atoms, dictionary.weights
    n, m = atoms.shape
    _check_cardinality(config.max_cardinality, m)
    rng = np.random.default_rng(rand.seed)
    xnorm = float(np.linalg.norm(x))
    zero_tol = _ZERO_SCALE * max(1.0, xnorm)
    eps = config.residual_threshold if config.stop_mode == THRESHOLD_OR_MAX else None
    if xnorm <= zero_tol or (eps is not None and xnorm <= eps):
        return _empty_result(m, n)

    support: list[int] = []
    blocked = np.zeros(m, dtype=bool)
    factor = np.zeros((0, 0))
    rhs = np.zeros(0)
    coeffs = np.zeros(0)
    recon = np.zeros(n)
    r = x
    res_norms: list[float] = []

    while len(support) < config.max_cardinality:
        u = w * (atoms.T @ r)
        u[blocked] = 0.0
        appended = False
        failed_here = False
        while True:
            mags = np.abs(u)
            peak = float(mags.max())
            if peak == 0.0:
                break
            candidates = np.nonzero(mags >= rand.tau_factor * peak)[0]
            probs = mags[candidates] / mags[candidates].sum()
            i0 = int(rng.choice(candidates, p=probs))
            sub = atoms[:, support]
            try:
                factor = cholesky_append(factor, sub.T @ atoms[:, i0],
                                         float(atoms[:, i0] @ atoms[:, i0]))
            except NotPositiveDefinite:
                blocked[i0] = True
                u[i0] = 0.0
                failed_here = True
                continue
            appended = True
            break
        if not appended:
            if failed_here and not support:
                raise RankDeficientSupport("no atom admits a positive-definite support Gram")
            break
        support.append(i0)
        blocked[i0] = True
        rhs = np.append(rhs, atoms[:, i0] @ x)
        coeffs = chol_solve(factor, rhs)
        recon = atoms[:, support] @ coeffs
        r = x - recon
        rn = float(np.linalg.norm(r))
        res_norms.append(rn)
        if (eps is not None and rn <= eps) or rn <= zero_tol:
            break

    return PursuitResult(SparseCode(m, support, coeffs), recon, res_norms, len(res_norms))


def mmse_estimate(dictionary: Dictionary, x, config: PursuitConfig, rand: RandConfig,
                  include_map: bool = True,
                  synthesis: Dictionary | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Average the codes of ``rand.draws`` randomized pursuits (MMSE-style).

    Draw ``i`` (0-based) runs with seed ``rand.seed ^ i``, so a single draw
    without the deterministic run reduces to plain ``rand_omp``. With
    ``include_map`` the deterministic ``omp`` code joins the average as one
    more term. Returns the averaged dense code and its reconstruction, which
    uses ``synthesis`` when given, else ``dictionary``.
    """
    x = _check_signal(dictionary, x)
    total = np.zeros(dictionary.n_atoms)
    for i in range(rand.draws):
        run = rand_omp(dictionary, x, config,
                       RandConfig(rand.tau_factor, rand.draws, rand.seed ^ i))
        total += run.code.to_dense()
    count = rand.draws
    if include_map:
        total += omp(dictionary, x, config).code.to_dense()
        count += 1
    avg = total / count
    basis = synthesis if synthesis is not None else dictionary
    if basis.n_atoms != dictionary.n_atoms:
        raise ShapeMismatch("synthesis dictionary must have the same atom count")
    return avg, basis.atoms @ avg


def oracle_estimate(dictionary: Dictionary, support, x) -> np.ndarray:
    """Least-squares reconstruction on a known support (empty support gives 0)."""
    x = _check_signal(dictionary, x)
    support = [int(i) for i in support]
    if len(set(support)) != len(support):
        raise ValueError("oracle support contains duplicate indices")
    for i in support:
        if not 0 <= i < dictionary.n_atoms:
            raise ValueError(f"oracle support index {i} out of range")
    if not support:
        return np.zeros(dictionary.n_features)
    coeffs = ls_solve(dictionary.atoms[:, support], x)
    return dictionary.atoms[:, support] @ coeffs


# ---------------------------------------------------------------------------
# banded-circulant (convolutional) dictionaries

@dataclass
class CscDictionary:
    """All circular shifts of ``m`` local filters over signals of length ``N``.

    The implied global dictionary is ``N x (m*N)`` with column
    ``g = filter * N + shift`` holding filter ``g // N`` circularly shifted
    by ``g % N``; it is never materialized except by ``materialize`` (tests).
    Two global atoms overlap iff their shifts are within circular distance
    ``n - 1``, where ``n`` is the filter length.
    """

    local_atoms: np.ndarray
    signal_length: int

    def __post_init__(self):
        self.local_atoms = np.asarray(self.local_atoms, dtype=np.float64)
        if self.local_atoms.ndim != 2:
            raise ShapeMismatch(f"local_atoms must be 2-D, got {self.local_atoms.shape}")
        if self.local_atoms.shape[0] > self.signal_length:
            raise ShapeMismatch(
                f"filter length {self.local_atoms.shape[0]} exceeds signal length "
                f"{self.signal_length}")
        norms = np.sqrt(np.sum(self.local_atoms * self.local_atoms, axis=0))
        if np.any(norms == 0.0):
            raise ZeroAtom("local dictionary contains a zero filter")
        self.local_norms = norms

    @property
    def filter_length(self) -> int:
        return self.local_atoms.shape[0]

    @property
    def n_filters(self) -> int:
        return self.local_atoms.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.n_filters * self.signal_length

    @property
    def weights(self) -> np.ndarray:
        """Per-global-atom reciprocal norms (shifts preserve the filter norm)."""
        return np.repeat(1.0 / self.local_norms, self.signal_length)

    def correlate(self, r) -> np.ndarray:
        """``D^T r`` by direct circular correlation, flattened filter-major."""
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (self.signal_length,):
            raise ShapeMismatch(f"signal shape {r.shape} != ({self.signal_length},)")
        big_n, n = self.signal_length, self.filter_length
        windows = r[(np.arange(big_n)[:, None] + np.arange(n)) % big_n]
        return (windows @ self.local_atoms).T.ravel()

    def synthesize(self, alpha) -> np.ndarray:
        """``D alpha`` by circular convolution of each filter's coefficient track."""
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape != (self.n_atoms,):
            raise ShapeMismatch(f"code shape {alpha.shape} != ({self.n_atoms},)")
        big_n, n = self.signal_length, self.filter_length
        tracks = alpha.reshape(self.n_filters, big_n)
        windows = tracks[:, (np.arange(big_n)[:, None] - np.arange(n)) % big_n]
        return np.einsum("jpi,ij->p", windows, self.local_atoms, optimize=True)

    def overlap_group(self, index: int) -> np.ndarray:
        """Global indices whose support windows overlap the given atom's."""
        big_n, n = self.signal_length, self.filter_length
        shift = index % big_n
        offsets = np.arange(-(n - 1), n)
        shifts = np.unique((shift + offsets) % big_n)
        return (np.arange(self.n_filters)[:, None] * big_n + shifts[None, :]).ravel()

    def materialize(self) -> np.ndarray:
        """Explicit global matrix (test/debug use only)."""
        big_n, n = self.signal_length, self.filter_length
        out = np.zeros((big_n, self.n_atoms))
        for j in range(self.n_filters):
            for t in range(big_n):
                out[(t + np.arange(n)) % big_n, j * big_n + t] = self.local_atoms[:, j]
        return out


def gmpt(u, csc: CscDictionary) -> np.ndarray:
    """Global max-projection thresholding.

    Repeatedly copies the largest-magnitude entry of ``u`` to the output and
    nullifies its whole overlap group, until nothing nonzero remains. The
    surviving entries therefore have mutually non-overlapping atoms.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (csc.n_atoms,):
        raise ShapeMismatch(f"u shape {u.shape} != ({csc.n_atoms},)")
    work = u.copy()
    out = np.zeros_like(u)
    while True:
        i0 = int(np.argmax(np.abs(work)))
        if work[i0] == 0.0:
            break
        out[i0] = work[i0]
        work[csc.overlap_group(i0)] = 0.0
    return out


def gcmp(csc: CscDictionary, x, config: PursuitConfig) -> PursuitResult:
    """Greedy convolutional matching pursuit on a banded-circulant dictionary.

    Each iteration adds a whole stripe of non-overlapping atoms (one gmpt
    pass on the weighted correlations) and accumulates their coefficients;
    ``max_cardinality`` bounds the number of iterations, not the support
    size. Correlations and reconstructions run as circular correlation and
    convolution; the global matrix is never formed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (csc.signal_length,):
        raise ShapeMismatch(f"signal shape {x.shape} != ({csc.signal_length},)")
    if config.max_cardinality < 1:
        raise ValueError("max_cardinality must be >= 1")
    w = csc.weights
    xnorm = float(np.linalg.norm(x))
    zero_tol = _ZERO_SCALE * max(1.0, xnorm)
    eps = config.residual_threshold if config.stop_mode == THRESHOLD_OR_MAX else None
    if xnorm <= zero_tol or (eps is not None and xnorm <= eps):
        return _empty_result(csc.n_atoms, csc.signal_length)

    alpha = np.zeros(csc.n_atoms)
    order: list[int] = []
    seen = set()
    r = x
    res_norms: list[float] = []
    for _ in range(config.max_cardinality):
        u = w * csc.correlate(r)
        stripe = gmpt(u, csc)
        picked = np.nonzero(stripe)[0]
        if picked.size == 0:
            break
        # gmpt picks in descending magnitude (ties to the lowest index)
        picked = picked[np.lexsort((picked, -np.abs(stripe[picked])))]
        for g in picked:
            if int(g) not in seen:
                seen.add(int(g))
                order.append(int(g))
        alpha += w * stripe
        recon = csc.synthesize(alpha)
        r = x - recon
        rn = float(np.linalg.norm(r))
        res_norms.append(rn)
        if (eps is not None and rn <= eps) or rn <= zero_tol:
            break

    recon = csc.synthesize(alpha)
    code = SparseCode(csc.n_atoms, order, alpha[order])
    return PursuitResult(code, recon, res_norms, len(res_norms))
