"""Coherence-regularized losses, ADAM, and the epoch loops for the networks.

One batch follows a fixed recipe: record a tape per signal (one tape for the
whole batch in the feed-forward thresholding network), convert the batch
outputs into per-output gradient seeds through the loss, sweep each tape
backward, sum the parameter gradients in dataset order, add the coherence
subgradient once, and take a single optimizer step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Node
from .errors import EmptyBatch, ShapeMismatch, UnknownMethod, ZeroAtom
from .pursuit import EXACT_CARDINALITY, PursuitConfig, RandConfig
from .synthetic import LabeledDataset, dictionary_distance
from .unrolled import (
    AttentionParams,
    LgmParams,
    ListaParams,
    lgm_backward,
    lgm_forward,
    lgm_mmse_forward,
    lista_forward,
    lmp_forward,
)

SUM_L2 = "sum-l2"
LOG_SUM_L2 = "log-sum-l2"
MODEL_KINDS = ("lgm", "lgm-mmse", "lmp", "lista")


# ---------------------------------------------------------------------------
# mutual coherence

def _attaining_pair(d: np.ndarray) -> tuple[int, int]:
    """Indices (i, j), i < j, of the most coherent atom pair (ties: lowest pair)."""
    norms = np.sqrt(np.einsum("ij,ij->j", d, d))
    if np.any(norms == 0.0):
        raise ZeroAtom(f"atom {int(np.argmin(norms))} has zero norm")
    gram = np.abs((d / norms).T @ (d / norms))
    np.fill_diagonal(gram, -1.0)
    # row-major argmax finds the lexicographically lowest (i, j); the first
    # occurrence of a symmetric off-diagonal value always has i < j
    i, j = divmod(int(np.argmax(gram)), gram.shape[0])
    return (i, j) if i < j else (j, i)


def mutual_coherence(dictionary) -> float:
    """Largest normalized inner product |d_i.d_j| / (||d_i|| ||d_j||), i != j.

    Always lies in [0, 1]; zero exactly when all atoms are pairwise
    orthogonal. Needs at least two columns, none of them zero.
    """
    d = np.asarray(getattr(dictionary, "atoms", dictionary), dtype=np.float64)
    if d.ndim != 2 or d.shape[1] < 2:
        raise ShapeMismatch(f"need a matrix with >= 2 columns, got shape {d.shape}")
    i, j = _attaining_pair(d)
    di, dj = d[:, i], d[:, j]
    return abs(float(np.dot(di, dj))) / (
        math.sqrt(float(np.dot(di, di))) * math.sqrt(float(np.dot(dj, dj))))


def coherence_gradient(dictionary) -> tuple[float, np.ndarray]:
    """Coherence value plus its subgradient through the attaining pair only."""
    d = np.asarray(getattr(dictionary, "atoms", dictionary), dtype=np.float64)
    if d.ndim != 2 or d.shape[1] < 2:
        raise ShapeMismatch(f"need a matrix with >= 2 columns, got shape {d.shape}")
    i, j = _attaining_pair(d)
    di, dj = d[:, i], d[:, j]
    a = math.sqrt(float(np.dot(di, di)))
    b = math.sqrt(float(np.dot(dj, dj)))
    ip = float(np.dot(di, dj))
    value = abs(ip) / (a * b)
    grad = np.zeros_like(d)
    sign = float(np.sign(ip))
    grad[:, i] = (sign / (a * b)) * (dj - (ip / a**2) * di)
    grad[:, j] = (sign / (a * b)) * (di - (ip / b**2) * dj)
    return value, grad


def coherence_op(dictionary_node: Node) -> Node:
    """Tape-recorded mutual coherence (scalar node, attaining-pair vjp)."""
    out = ad.apply(lambda d: np.asarray(mutual_coherence(d)), dictionary_node)
    parent = out.parents[0]
    out.vjp = lambda g: (float(g) * coherence_gradient(parent.value)[1],)
    return out


# ---------------------------------------------------------------------------
# losses

@dataclass
class LossConfig:
    """kind: sum-l2 or log-sum-l2; xi weights the coherence penalty."""

    kind: str = SUM_L2
    xi: float = 0.0

    def __post_init__(self):
        if self.kind not in (SUM_L2, LOG_SUM_L2):
            raise UnknownMethod(f"unknown loss kind {self.kind!r}")
        if not (np.isfinite(self.xi) and self.xi >= 0.0):
            raise ValueError(f"xi must be >= 0, got {self.xi}")


def loss(outputs, targets, dictionaries, config: LossConfig):
    """Batch loss value and the per-output gradient seeds.

    ``outputs``/``targets`` are matching lists of vectors or a pair of
    (n, B) column-stacked arrays. The fit term sums ||target - output||^2
    over the batch; the coherence penalty ``xi * sum_D mu(D)`` enters once
    per call. Seeds cover only the fit term (the coherence subgradient is a
    direct function of the dictionaries, see :func:`coherence_gradient`).
    """
    batched = isinstance(outputs, np.ndarray) and np.asarray(outputs).ndim == 2
    if batched:
        outs = np.asarray(outputs, dtype=np.float64)
        targs = np.asarray(targets, dtype=np.float64)
        if outs.shape != targs.shape:
            raise ShapeMismatch(f"outputs {outs.shape} vs targets {targs.shape}")
        if outs.shape[1] == 0:
            raise EmptyBatch("loss needs at least one output column")
        diffs = outs - targs
        fit = float(np.sum(diffs * diffs))
    else:
        outs = [np.asarray(o, dtype=np.float64) for o in outputs]
        targs = [np.asarray(t, dtype=np.float64) for t in targets]
        if len(outs) != len(targs):
            raise ShapeMismatch(f"{len(outs)} outputs vs {len(targs)} targets")
        if not outs:
            raise EmptyBatch("loss needs at least one output")
        diffs = []
        fit = 0.0
        for o, t in zip(outs, targs):
            if o.shape != t.shape:
                raise ShapeMismatch(f"output {o.shape} vs target {t.shape}")
            d = o - t
            diffs.append(d)
            fit += float(np.dot(d, d))

    penalty = config.xi * sum(mutual_coherence(d) for d in dictionaries) \
        if config.xi > 0.0 else 0.0
    if config.kind == SUM_L2:
        value = fit + penalty
        scale = 2.0
    else:
        if fit <= 0.0:
            raise ValueError("log loss needs a strictly positive fit term")
        value = math.log(fit) + penalty
        scale = 2.0 / fit
    seeds = scale * diffs if batched else [scale * d for d in diffs]
    return value, seeds


# ---------------------------------------------------------------------------
# ADAM

@dataclass
class AdamConfig:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_factor: float = 0.5
    decay_every: int = 0  # 0 disables the schedule

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0.0):
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {beta}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.decay_every < 0 or not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay needs factor in (0, 1] and every >= 0")


class Adam:
    """ADAM with bias correction and lazy per-parameter updates.

    A parameter whose gradient is identically zero in a step is left
    untouched, moments included, so a zero gradient is the identity on the
    parameters. Each parameter keeps its own step count for the bias
    correction. ``end_epoch`` applies the optional learning-rate decay.
    """

    def __init__(self, config: AdamConfig):
        self.config = config
        self.learning_rate = config.learning_rate
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        cfg = self.config
        out = {}
        for name, value in params.items():
            value = np.asarray(value, dtype=np.float64)
            grad = grads.get(name)
            if grad is None or not np.any(grad):
                out[name] = value
                continue
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != value.shape:
                raise ShapeMismatch(
                    f"gradient for {name!r} has shape {grad.shape}, expected {value.shape}")
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(value)
                self._m[name] = m
                self._v[name] = np.zeros_like(value)
                self._t[name] = 0
            v = self._v[name]
            self._t[name] += 1
            t = self._t[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            out[name] = value - self.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        return out

    def end_epoch(self, epoch: int) -> None:
        """Decay the learning rate after every ``decay_every``-th epoch (1-based)."""
        if self.config.decay_every and epoch % self.config.decay_every == 0:
            self.learning_rate *= self.config.decay_factor


def adam_step(state: Adam, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One optimizer step; ``state`` is mutated, updated parameters returned."""
    return state.step(params, grads)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    kind: str
    epochs: int
    adam: AdamConfig
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 50
    seed: int = 0
    max_cardinality: int = 0
    residual_threshold: float = 0.0
    stop_mode: str = EXACT_CARDINALITY
    rand: RandConfig | None = None
    include_map: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise UnknownMethod(
                f"unknown model kind {self.kind!r}, expected one of {MODEL_KINDS}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.kind != "lista" and self.max_cardinality < 1:
            raise ValueError(f"{self.kind} training needs max_cardinality >= 1")
        if self.kind == "lgm-mmse" and self.rand is None:
            self.rand = RandConfig()

    def pursuit_config(self) -> PursuitConfig:
        return PursuitConfig(self.max_cardinality, self.residual_threshold, self.stop_mode)


_HISTORY_COLUMNS = ("train_loss", "test_mse", "mean_cardinality", "dict_distance")


@dataclass
class TrainRun:
    """Final parameters plus the epoch history of the tracked metrics.

    ``initial`` holds the metrics of the untrained model (the only row when
    epochs = 0); ``history`` has exactly one entry per completed epoch.
    Metrics without an input (no test set, no reference dictionary) are NaN.
    """

    params: LgmParams | ListaParams
    attention: AttentionParams | None
    initial: dict[str, float]
    history: list[dict[str, float]]

    @property
    def epochs_completed(self) -> int:
        return len(self.history)

    def rows(self) -> list[dict[str, float]]:
        out = [{"epoch": 0, **self.initial}]
        for k, entry in enumerate(self.history):
            out.append({"epoch": k + 1, **entry})
        return out

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("epoch",) + _HISTORY_COLUMNS)
            for row in self.rows():
                writer.writerow([row["epoch"]] + [repr(row[c]) for c in _HISTORY_COLUMNS])


def _forward(kind: str, params, attention, config: TrainConfig, signal, tape,
             dataset_index: int):
    if kind == "lgm":
        return lgm_forward(params, signal, config.pursuit_config(),
                           attention=attention, tape=tape)
    if kind == "lgm-mmse":
        rand = config.rand
        per_signal = RandConfig(rand.tau_factor, rand.draws, rand.seed + dataset_index)
        return lgm_mmse_forward(params, signal, config.pursuit_config(), per_signal,
                                include_map=config.include_map, attention=attention,
                                tape=tape)
    return lmp_forward(params, signal, config.pursuit_config(), tape=tape)


def _learned_dicts(kind: str, params) -> list[np.ndarray]:
    if kind == "lista":
        return [params.d1, params.d2]
    return [params.analysis.atoms, params.synthesis.atoms]


def _coherence_names(kind: str) -> tuple[str, str]:
    return ("d1", "d2") if kind == "lista" else ("analysis", "synthesis")


def _batch_step(kind, params, attention, config, noisy, clean, indices, optimizer):
    """Forward/backward over one mini-batch plus one optimizer step."""
    xi = config.loss.xi
    if kind == "lista":
        tape = GradientTape()
        trace = lista_forward(params, noisy[:, indices], tape=tape)
        value, seed = loss(trace.output, clean[:, indices],
                           _learned_dicts(kind, params), config.loss)
        tape.backward(seed)
        grads = {name: tape.grad_of(name) for name in tape.params}
    else:
        tapes = []
        outputs = []
        for j in indices:
            tape = GradientTape()
            trace = _forward(kind, params, attention, config, noisy[:, j], tape, int(j))
            tapes.append(tape)
            outputs.append(trace.output)
        value, seeds = loss(outputs, [clean[:, j] for j in indices],
                            _learned_dicts(kind, params), config.loss)
        grads = {}
        for tape, seed in zip(tapes, seeds):
            for name, grad in lgm_backward(tape, seed).items():
                if name in grads:
                    grads[name] += grad
                else:
                    grads[name] = grad.copy()
    if xi > 0.0:
        for name, d in zip(_coherence_names(kind), _learned_dicts(kind, params)):
            grads[name] = grads.get(name, 0.0) + xi * coherence_gradient(d)[1]

    tensors = dict(params.tensors())
    if attention is not None:
        tensors.update(attention.tensors())
    updated = optimizer.step(tensors, grads)
    if kind == "lista":
        updated["theta"] = np.maximum(updated["theta"], 0.0)
    new_params = params.with_tensors(updated)
    new_attention = None if attention is None else attention.with_tensors(updated)
    return value, new_params, new_attention


def _frozen_loss(kind, params, attention, config, dataset: LabeledDataset) -> float:
    """Loss of the current parameters over the dataset, in dataset-order batches."""
    total = 0.0
    order = np.arange(dataset.n_signals)
    for start in range(0, order.size, config.batch_size):
        indices = order[start:start + config.batch_size]
        if kind == "lista":
            trace = lista_forward(params, dataset.noisy[:, indices])
            value, _ = loss(trace.output, dataset.clean[:, indices],
                            _learned_dicts(kind, params), config.loss)
        else:
            outputs = [_forward(kind, params, attention, config,
                                dataset.noisy[:, j], None, int(j)).output
                       for j in indices]
            value, _ = loss(outputs, [dataset.clean[:, j] for j in indices],
                            _learned_dicts(kind, params), config.loss)
        total += value
    return total


def evaluate_model(kind: str, params, attention, config: TrainConfig,
                   dataset: LabeledDataset) -> tuple[float, float]:
    """(mean ||x* - x_hat||^2, mean recovered cardinality) on a dataset."""
    if dataset.n_signals == 0:
        raise EmptyBatch("evaluation needs at least one signal")
    if kind == "lista":
        trace = lista_forward(params, dataset.noisy)
        diffs = trace.output - dataset.clean
        mse = float(np.mean(np.sum(diffs * diffs, axis=0)))
        card = float(np.mean(np.count_nonzero(trace.coeffs, axis=0)))
        return mse, card
    err = 0.0
    card = 0.0
    for j in range(dataset.n_signals):
        trace = _forward(kind, params, attention, config, dataset.noisy[:, j], None, j)
        d = trace.output - dataset.clean[:, j]
        err += float(np.dot(d, d))
        card += (np.count_nonzero(trace.coeffs) if kind == "lgm-mmse"
                 else len(trace.support))
    return err / dataset.n_signals, card / dataset.n_signals


def _distance_dict(kind: str, params) -> np.ndarray:
    # which dictionary the distance history follows: the selection one for
    # greedy nets, the reconstruction one for the thresholding net
    return params.d2 if kind == "lista" else params.analysis.atoms


def _metrics(kind, params, attention, config, train_set, test_set, reference,
             train_loss: float | None) -> dict[str, float]:
    if train_loss is None:
        train_loss = _frozen_loss(kind, params, attention, config, train_set)
    if test_set is not None:
        test_mse, card = evaluate_model(kind, params, attention, config, test_set)
    else:
        test_mse, card = float("nan"), float("nan")
    dist = (dictionary_distance(reference, _distance_dict(kind, params))
            if reference is not None else float("nan"))
    return {"train_loss": train_loss, "test_mse": test_mse,
            "mean_cardinality": card, "dict_distance": dist}


def train(model, config: TrainConfig, train_set: LabeledDataset,
          test_set: LabeledDataset | None = None, *,
          attention: AttentionParams | None = None,
          reference: np.ndarray | None = None,
          callback=None) -> TrainRun:
    """Mini-batch training loop; deterministic given (seed, dataset, config).

    ``model`` is LgmParams for the greedy kinds or ListaParams for lista.
    Per epoch: shuffle, forward/backward per batch, one ADAM step per batch
    (thresholds reprojected to >= 0 for lista), then evaluation on
    ``test_set`` plus the dictionary distance to ``reference`` when given.
    ``callback(epoch, row)`` runs after each epoch. Epoch train loss sums the
    running batch losses; the ``initial`` row evaluates the untrained model.
    """
    expected = ListaParams if config.kind == "lista" else LgmParams
    if not isinstance(model, expected):
        raise ShapeMismatch(
            f"{config.kind} training expects {expected.__name__}, got {type(model).__name__}")
    if train_set.n_signals == 0:
        raise EmptyBatch("training set is empty")
    if attention is not None and config.kind in ("lista", "lmp"):
        raise ValueError(f"{config.kind} has no attention parameters")

    params = model
    att = attention
    optimizer = Adam(config.adam)
    rng = np.random.default_rng(config.seed)
    initial = _metrics(config.kind, params, att, config, train_set, test_set,
                       reference, None)
    history: list[dict[str, float]] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_set.n_signals)
        epoch_loss = 0.0
        for start in range(0, order.size, config.batch_size):
            indices = order[start:start + config.batch_size]
            value, params, att = _batch_step(config.kind, params, att, config,
                                             train_set.noisy, train_set.clean,
                                             indices, optimizer)
            epoch_loss += value
        optimizer.end_epoch(epoch)
        row = _metrics(config.kind, params, att, config, train_set, test_set,
                       reference, epoch_loss)
        history.append(row)
        if callback is not None:
            callback(epoch, row)
    return TrainRun(params, att, initial, history)
