"""scikit-learn style facade: row-major estimators over the functional core.

Samples follow the sklearn convention (one signal per row); the wrappers
transpose in and out of the column-major core. GreedyCoder is a stateless
transformer around the pursuit engines; LgmDenoiser and ListaDenoiser train
the unrolled networks as denoising autoencoders via fit(noisy, clean).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ShapeMismatch, UnknownMethod
from .pursuit import (
    EXACT_CARDINALITY,
    THRESHOLD_OR_MAX,
    Dictionary,
    PursuitConfig,
    RandConfig,
    batch_omp,
    mmse_estimate,
    mp,
    omp,
    rand_omp,
    sp,
)
from .synthetic import LabeledDataset
from .training import AdamConfig, LossConfig, TrainConfig, train
from .unrolled import (
    LgmParams,
    ListaParams,
    lgm_forward,
    lgm_mmse_forward,
    lista_forward,
    lmp_forward,
)

_CODERS = ("omp", "mp", "sp", "batch-omp", "rand-omp", "mmse")


def _signals(X) -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_2d=True)


def _random_dictionary(n: int, m: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, m))
    return d / np.sqrt(np.sum(d * d, axis=0))


class GreedyCoder(TransformerMixin, BaseEstimator):
    """Sparse-code rows of X against a fixed dictionary.

    ``transform`` returns dense codes (n_samples, n_atoms);
    ``inverse_transform`` maps codes back to signals. ``exact_cardinality``
    switches the stopping rule from threshold-or-max to exactly
    ``max_cardinality`` atoms.
    """

    def __init__(self, dictionary=None, algorithm="omp", max_cardinality=10,
                 residual_threshold=0.0, exact_cardinality=False,
                 tau_factor=0.8, draws=5, include_map=True, seed=0):
        self.dictionary = dictionary
        self.algorithm = algorithm
        self.max_cardinality = max_cardinality
        self.residual_threshold = residual_threshold
        self.exact_cardinality = exact_cardinality
        self.tau_factor = tau_factor
        self.draws = draws
        self.include_map = include_map
        self.seed = seed

    def _config(self) -> PursuitConfig:
        mode = EXACT_CARDINALITY if self.exact_cardinality else THRESHOLD_OR_MAX
        return PursuitConfig(self.max_cardinality, self.residual_threshold, mode)

    def fit(self, X, y=None):
        X = _signals(X)
        if self.algorithm not in _CODERS:
            raise UnknownMethod(
                f"unknown algorithm {self.algorithm!r}, expected one of {_CODERS}")
        if self.dictionary is None:
            raise ValueError("GreedyCoder needs a dictionary")
        atoms = np.asarray(self.dictionary, dtype=np.float64)
        if atoms.ndim != 2 or atoms.shape[0] != X.shape[1]:
            raise ShapeMismatch(
                f"dictionary shape {atoms.shape} does not code {X.shape[1]}-long signals")
        self.dictionary_ = Dictionary(atoms)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "dictionary_")
        X = _signals(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(
                f"X has {X.shape[1]} features, fitted for {self.n_features_in_}")
        d = self.dictionary_
        cfg = self._config()
        codes = np.zeros((X.shape[0], d.atoms.shape[1]))
        if self.algorithm == "batch-omp":
            for j, result in enumerate(batch_omp(d, X.T, cfg)):
                codes[j] = result.code.to_dense()
            return codes
        for j in range(X.shape[0]):
            x = X[j]
            if self.algorithm == "omp":
                codes[j] = omp(d, x, cfg).code.to_dense()
            elif self.algorithm == "mp":
                codes[j] = mp(d, x, cfg).code.to_dense()
            elif self.algorithm == "sp":
                codes[j] = sp(d, x, cfg.max_cardinality).code.to_dense()
            elif self.algorithm == "rand-omp":
                rand = RandConfig(self.tau_factor, self.draws, self.seed + j)
                codes[j] = rand_omp(d, x, cfg, rand).code.to_dense()
            else:
                rand = RandConfig(self.tau_factor, self.draws, self.seed + j)
                codes[j], _ = mmse_estimate(d, x, cfg, rand,
                                            include_map=self.include_map)
        return codes

    def inverse_transform(self, codes) -> np.ndarray:
        check_is_fitted(self, "dictionary_")
        codes = _signals(codes)
        return codes @ self.dictionary_.atoms.T


class _DenoiserBase(BaseEstimator):
    """Shared fit plumbing for the trained networks."""

    def _dataset(self, X, y) -> LabeledDataset:
        X = _signals(X)
        y = _signals(y)
        if X.shape != y.shape:
            raise ShapeMismatch(f"noisy {X.shape} and clean {y.shape} must match")
        self.n_features_in_ = X.shape[1]
        return LabeledDataset(y.T, X.T, np.zeros((1, X.shape[0])), 0.0)

    def _initial_dictionary(self, n_features: int) -> np.ndarray:
        if self.init_dictionary is not None:
            d = np.asarray(self.init_dictionary, dtype=np.float64)
            if d.ndim != 2 or d.shape[0] != n_features:
                raise ShapeMismatch(
                    f"init dictionary shape {d.shape} incompatible with "
                    f"{n_features}-long signals")
            return d
        m = self.n_atoms if self.n_atoms else 2 * n_features
        return _random_dictionary(n_features, m, self.seed)

    def score(self, X, y) -> float:
        """Negative mean squared reconstruction error against y."""
        X = _signals(X)
        y = _signals(y)
        diff = self.predict(X) - y
        return -float(np.mean(np.sum(diff * diff, axis=1)))


class LgmDenoiser(_DenoiserBase):
    """Trainable greedy network: fit(noisy, clean), predict denoises rows.

    ``kind`` picks the forward pass: plain greedy ("lgm"), the randomized
    average ("lgm-mmse"), or the accumulating variant ("lmp").
    """

    def __init__(self, kind="lgm", max_cardinality=10, residual_threshold=0.0,
                 exact_cardinality=True, epochs=20, batch_size=50,
                 learning_rate=0.002, xi=5e-5, loss_kind="sum-l2",
                 tau_factor=0.8, draws=5, include_map=True,
                 init_dictionary=None, n_atoms=None, seed=0):
        self.kind = kind
        self.max_cardinality = max_cardinality
        self.residual_threshold = residual_threshold
        self.exact_cardinality = exact_cardinality
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.xi = xi
        self.loss_kind = loss_kind
        self.tau_factor = tau_factor
        self.draws = draws
        self.include_map = include_map
        self.init_dictionary = init_dictionary
        self.n_atoms = n_atoms
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        mode = EXACT_CARDINALITY if self.exact_cardinality else THRESHOLD_OR_MAX
        return TrainConfig(
            kind=self.kind, epochs=self.epochs,
            adam=AdamConfig(self.learning_rate),
            loss=LossConfig(self.loss_kind, self.xi),
            batch_size=self.batch_size, seed=self.seed,
            max_cardinality=self.max_cardinality,
            residual_threshold=self.residual_threshold, stop_mode=mode,
            rand=RandConfig(self.tau_factor, self.draws, self.seed),
            include_map=self.include_map)

    def fit(self, X, y):
        dataset = self._dataset(X, y)
        d0 = self._initial_dictionary(self.n_features_in_)
        model = LgmParams(Dictionary(d0.copy()), Dictionary(d0.copy()))
        run = train(model, self._train_config(), dataset)
        self.model_ = run.params
        self.run_ = run
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _signals(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(
                f"X has {X.shape[1]} features, fitted for {self.n_features_in_}")
        cfg = self._train_config()
        out = np.empty_like(X)
        for j in range(X.shape[0]):
            if self.kind == "lgm-mmse":
                rand = RandConfig(self.tau_factor, self.draws, self.seed + j)
                trace = lgm_mmse_forward(self.model_, X[j], cfg.pursuit_config(),
                                         rand, include_map=self.include_map)
            elif self.kind == "lmp":
                trace = lmp_forward(self.model_, X[j], cfg.pursuit_config())
            else:
                trace = lgm_forward(self.model_, X[j], cfg.pursuit_config())
            out[j] = trace.output
        return out


class ListaDenoiser(_DenoiserBase):
    """Trainable feed-forward thresholding network over signal rows."""

    def __init__(self, iterations=7, epochs=20, batch_size=50,
                 learning_rate=1e-5, xi=5e-5, loss_kind="sum-l2",
                 theta0=0.01, init_dictionary=None, n_atoms=None, seed=0):
        self.iterations = iterations
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.xi = xi
        self.loss_kind = loss_kind
        self.theta0 = theta0
        self.init_dictionary = init_dictionary
        self.n_atoms = n_atoms
        self.seed = seed

    def fit(self, X, y):
        dataset = self._dataset(X, y)
        d0 = self._initial_dictionary(self.n_features_in_)
        model = ListaParams.init(d0, self.iterations, theta0=self.theta0)
        config = TrainConfig(kind="lista", epochs=self.epochs,
                             adam=AdamConfig(self.learning_rate),
                             loss=LossConfig(self.loss_kind, self.xi),
                             batch_size=self.batch_size, seed=self.seed)
        run = train(model, config, dataset)
        self.model_ = run.params
        self.run_ = run
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _signals(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(
                f"X has {X.shape[1]} features, fitted for {self.n_features_in_}")
        return lista_forward(self.model_, X.T).output.T
