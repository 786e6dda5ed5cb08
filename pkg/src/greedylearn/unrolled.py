"""Unrolled greedy networks: differentiable pursuit with learned dictionaries.

The forward passes mirror the pursuit engines layer for layer but are
recorded on a GradientTape so every parameter (analysis/synthesis
dictionaries, DC scales, attention weights, LISTA tensors) receives exact
gradients; the discrete atom selections are treated as constants of the
recorded graph.

Conventions shared with :mod:`greedylearn.pursuit`: norm-weighted
correlations with a unit weight on the DC atom, lowest-index tie breaks, and
a least-squares on the analysis sub-dictionary whose coefficients are
synthesized through the synthesis sub-dictionary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Node
from .errors import (
    CorruptHeader,
    RankDeficientSupport,
    ShapeMismatch,
    TapeMissing,
)
from .pursuit import (
    EXACT_CARDINALITY,
    THRESHOLD_OR_MAX,
    Dictionary,
    PursuitConfig,
    RandConfig,
    _ZERO_SCALE,
)

_N_BLOCKS = 4


# ---------------------------------------------------------------------------
# parameter containers

@dataclass
class LgmParams:
    """Learned greedy-method parameters: dual dictionaries + optional DC scales.

    ``analysis`` drives selection and least squares; ``synthesis`` produces
    reconstructions. When the DC scales are set, each dictionary gains one
    trailing constant atom ``scale * 1`` whose correlation weight is pinned
    to 1; both scales must be set together and be positive and finite.
    """

    analysis: Dictionary
    synthesis: Dictionary
    dc_scale_analysis: float | None = None
    dc_scale_synthesis: float | None = None

    def __post_init__(self):
        if self.analysis.atoms.shape != self.synthesis.atoms.shape:
            raise ShapeMismatch(
                f"analysis shape {self.analysis.atoms.shape} != synthesis shape "
                f"{self.synthesis.atoms.shape}")
        if (self.dc_scale_analysis is None) != (self.dc_scale_synthesis is None):
            raise ValueError("set both DC scales or neither")
        for scale in (self.dc_scale_analysis, self.dc_scale_synthesis):
            if scale is not None and not (np.isfinite(scale) and scale > 0.0):
                raise ValueError(f"DC scale must be positive and finite, got {scale}")

    @property
    def use_dc(self) -> bool:
        return self.dc_scale_analysis is not None

    @property
    def n_features(self) -> int:
        return self.analysis.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        """Effective atom count including the DC atom when present."""
        return self.analysis.atoms.shape[1] + (1 if self.use_dc else 0)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"analysis": self.analysis.atoms, "synthesis": self.synthesis.atoms}
        if self.use_dc:
            out["dc_analysis"] = np.asarray(self.dc_scale_analysis, dtype=np.float64)
            out["dc_synthesis"] = np.asarray(self.dc_scale_synthesis, dtype=np.float64)
        return out

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "LgmParams":
        dc_a = tensors.get("dc_analysis")
        dc_s = tensors.get("dc_synthesis")
        return LgmParams(Dictionary(tensors["analysis"]), Dictionary(tensors["synthesis"]),
                         None if dc_a is None else float(dc_a),
                         None if dc_s is None else float(dc_s))


@dataclass
class AttentionParams:
    """Depth-attention weights: 4 blocks of (W2 M W1 + b) + a softmax readout.

    Shapes for signal length n and depth s: each ``w1`` is (n, n), each
    ``w2`` (s, s), each ``bias`` (s,), and ``w_out`` (n, 1), for
    ``4 (n^2 + s^2 + s) + n`` scalars in total.
    """

    w1: list[np.ndarray]
    w2: list[np.ndarray]
    bias: list[np.ndarray]
    w_out: np.ndarray

    def __post_init__(self):
        if not (len(self.w1) == len(self.w2) == len(self.bias) == _N_BLOCKS):
            raise ShapeMismatch(f"attention needs exactly {_N_BLOCKS} blocks")
        self.w1 = [np.asarray(a, dtype=np.float64) for a in self.w1]
        self.w2 = [np.asarray(a, dtype=np.float64) for a in self.w2]
        self.bias = [np.asarray(a, dtype=np.float64) for a in self.bias]
        self.w_out = np.asarray(self.w_out, dtype=np.float64)
        n, s = self.w_out.shape[0], self.w2[0].shape[0]
        if self.w_out.shape != (n, 1):
            raise ShapeMismatch(f"w_out must be (n, 1), got {self.w_out.shape}")
        for a in self.w1:
            if a.shape != (n, n):
                raise ShapeMismatch(f"w1 block shape {a.shape} != ({n}, {n})")
        for a in self.w2:
            if a.shape != (s, s):
                raise ShapeMismatch(f"w2 block shape {a.shape} != ({s}, {s})")
        for a in self.bias:
            if a.shape != (s,):
                raise ShapeMismatch(f"bias block shape {a.shape} != ({s},)")

    @property
    def depth(self) -> int:
        return self.w2[0].shape[0]

    @property
    def signal_length(self) -> int:
        return self.w_out.shape[0]

    @property
    def n_parameters(self) -> int:
        n, s = self.signal_length, self.depth
        return _N_BLOCKS * (n * n + s * s + s) + n

    @classmethod
    def zeros(cls, n: int, s: int) -> "AttentionParams":
        return cls([np.zeros((n, n)) for _ in range(_N_BLOCKS)],
                   [np.zeros((s, s)) for _ in range(_N_BLOCKS)],
                   [np.zeros(s) for _ in range(_N_BLOCKS)],
                   np.zeros((n, 1)))

    @classmethod
    def init(cls, n: int, s: int, seed: int = 0) -> "AttentionParams":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)

        def glorot(rows, cols):
            bound = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-bound, bound, size=(rows, cols))

        return cls([glorot(n, n) for _ in range(_N_BLOCKS)],
                   [glorot(s, s) for _ in range(_N_BLOCKS)],
                   [np.zeros(s) for _ in range(_N_BLOCKS)],
                   glorot(n, 1))

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in range(_N_BLOCKS):
            out[f"att_w1_{k}"] = self.w1[k]
            out[f"att_w2_{k}"] = self.w2[k]
            out[f"att_b_{k}"] = self.bias[k]
        out["att_wout"] = self.w_out
        return out

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "AttentionParams":
        return AttentionParams([tensors[f"att_w1_{k}"] for k in range(_N_BLOCKS)],
                               [tensors[f"att_w2_{k}"] for k in range(_N_BLOCKS)],
                               [tensors[f"att_b_{k}"] for k in range(_N_BLOCKS)],
                               tensors["att_wout"])


@dataclass
class ListaParams:
    """Learned ISTA tensors: ``a_t = S_theta(a_{t-1} + W (x - D1 a_{t-1}))``."""

    w: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    theta: np.ndarray
    iterations: int

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.d1 = np.asarray(self.d1, dtype=np.float64)
        self.d2 = np.asarray(self.d2, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        n, m = self.d1.shape
        if self.d2.shape != (n, m) or self.w.shape != (m, n) or self.theta.shape != (m,):
            raise ShapeMismatch("inconsistent LISTA tensor shapes")
        if np.any(self.theta < 0.0):
            raise ValueError("thresholds must be nonnegative")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")

    @classmethod
    def init(cls, dictionary: np.ndarray, iterations: int,
             theta0: float = 0.01) -> "ListaParams":
        """Tie the tensors to a dictionary: W = D^T / c, D1 = D2 = D.

        ``c = 1.05 * lambda_max(D^T D)`` estimated by 100 power iterations,
        so the implied gradient step is a valid ISTA step size.
        """
        d = np.asarray(dictionary, dtype=np.float64)
        c = 1.05 * power_lambda_max(d.T @ d)
        return cls(d.T / c, d.copy(), d.copy(), np.full(d.shape[1], theta0), iterations)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "d1": self.d1, "d2": self.d2, "theta": self.theta}

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ListaParams":
        return ListaParams(tensors["w"], tensors["d1"], tensors["d2"], tensors["theta"],
                           self.iterations)


@dataclass
class UnrolledTrace:
    """Per-layer record of one unrolled forward pass."""

    selected: list[int]
    coeffs: np.ndarray
    reconstructions: list[np.ndarray]
    residual_norms: list[float]
    output: np.ndarray
    attention_weights: np.ndarray | None = None
    output_node: Node | None = None

    @property
    def layers(self) -> int:
        return len(self.reconstructions)

    @property
    def support(self) -> list[int]:
        """Distinct selected atoms in first-selection order (sentinels dropped)."""
        seen: list[int] = []
        for i in self.selected:
            if i >= 0 and i not in seen:
                seen.append(i)
        return seen


def power_lambda_max(gram: np.ndarray, iterations: int = 100) -> float:
    """Largest eigenvalue of an SPD matrix by deterministic power iteration."""
    g = np.asarray(gram, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeMismatch(f"gram must be square, got {g.shape}")
    v = np.ones(g.shape[0]) / np.sqrt(g.shape[0])
    for _ in range(iterations):
        w = g @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(v @ (g @ v))


# ---------------------------------------------------------------------------
# plain-array selection operators (the graph versions live in autodiff)

def mpt(u: np.ndarray) -> np.ndarray:
    """Zero all but the largest-magnitude entry (ties: lowest index)."""
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros_like(u)
    i0 = int(np.argmax(np.abs(u)))
    out[i0] = u[i0]
    return out


def mspt(u: np.ndarray, s: int) -> np.ndarray:
    """One column per survivor: the s largest magnitudes, descending order.

    Column j keeps only entry ``i_j`` of ``u``; ties resolve to the lowest
    index, so the output is fully deterministic.
    """
    u = np.asarray(u, dtype=np.float64)
    if not 1 <= s <= u.shape[0]:
        raise ValueError(f"s must lie in [1, {u.shape[0]}], got {s}")
    order = np.argsort(-np.abs(u), kind="stable")[:s]
    out = np.zeros((u.shape[0], s))
    out[order, np.arange(s)] = u[order]
    return out


def atos(dictionary: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Atom extraction ``D |y| / max|y|``; equals the selected column of D."""
    d = np.asarray(dictionary, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    peak = np.max(np.abs(y))
    if peak == 0.0:
        from .errors import AllZeroInput

        raise AllZeroInput("atos needs a nonzero selection vector")
    return d @ (np.abs(y) / peak)


def satos(dictionary: np.ndarray, selections: np.ndarray) -> np.ndarray:
    """Column-wise atom extraction: one sub-dictionary column per selection."""
    sel = np.asarray(selections, dtype=np.float64)
    if sel.ndim != 2:
        raise ShapeMismatch(f"selections must be 2-D, got {sel.shape}")
    return np.stack([atos(dictionary, sel[:, j]) for j in range(sel.shape[1])], axis=1)


# ---------------------------------------------------------------------------
# parameter leaves

def _lgm_leaves(tape: GradientTape, params: LgmParams):
    """Create (once per tape) the parameter leaves and effective dictionaries."""
    d_a = tape.leaf(params.analysis.atoms, name="analysis")
    d_s = tape.leaf(params.synthesis.atoms, name="synthesis")
    if params.use_dc:
        n = params.n_features
        ones_col = tape.constant(np.ones((n, 1)))
        sc_a = tape.leaf(np.asarray(params.dc_scale_analysis, dtype=np.float64),
                         name="dc_analysis")
        sc_s = tape.leaf(np.asarray(params.dc_scale_synthesis, dtype=np.float64),
                         name="dc_synthesis")
        d_a_eff = ad.concat_cols(d_a, ad.mul(sc_a, ones_col))
        d_s_eff = ad.concat_cols(d_s, ad.mul(sc_s, ones_col))
        unit = params.analysis.atoms.shape[1]
    else:
        d_a_eff, d_s_eff, unit = d_a, d_s, None
    weights = ad.inv_col_norms(d_a_eff, unit_index=unit)
    return d_a_eff, d_s_eff, weights


def _attention_leaves(tape: GradientTape, attention: AttentionParams):
    return {name: tape.leaf(value, name=name) for name, value in attention.tensors().items()}


def _attention_graph(res_stack: Node, leaves: dict[str, Node], batched: bool) -> Node:
    """Attention weights from stacked residuals: (s, n) -> (s,) or (P, s, n) -> (P, s)."""
    m = res_stack
    for k in range(_N_BLOCKS):
        w1, w2, b = leaves[f"att_w1_{k}"], leaves[f"att_w2_{k}"], leaves[f"att_b_{k}"]
        if batched:
            m = ad.add(ad.right_mm(ad.left_mm(w2, m), w1),
                       ad.reshape(b, (b.value.shape[0], 1)))
        else:
            m = ad.add(ad.matmul(ad.matmul(w2, m), w1),
                       ad.reshape(b, (b.value.shape[0], 1)))
        m = ad.relu(m)
    logits = ad.right_mm(m, leaves["att_wout"]) if batched else ad.matmul(m, leaves["att_wout"])
    if batched:
        logits = ad.reshape(logits, logits.value.shape[:2])
    else:
        logits = ad.reshape(logits, (logits.value.shape[0],))
    return ad.softmax(logits, axis=-1)


def attention_forward(residuals, params: AttentionParams, tape: GradientTape | None = None):
    """Depth-attention weights for a stack of per-layer residual rows (s, n).

    Returns a plain array when called with one, or the recorded node when
    ``residuals`` is a Node (``tape`` then must match). All-zero parameters
    give exactly uniform weights.
    """
    if isinstance(residuals, Node):
        node = residuals
        tape = node.tape
    else:
        residuals = np.asarray(residuals, dtype=np.float64)
        if residuals.ndim != 2:
            raise ShapeMismatch(f"residuals must be (s, n), got {residuals.shape}")
        tape = tape or GradientTape()
        node = tape.constant(residuals)
    if node.value.shape != (params.depth, params.signal_length):
        raise ShapeMismatch(
            f"residuals shape {node.value.shape} != ({params.depth}, {params.signal_length})")
    leaves = _attention_leaves(tape, params)
    out = _attention_graph(node, leaves, batched=False)
    return out if isinstance(residuals, Node) else out.value


# ---------------------------------------------------------------------------
# LGM

def _select_index(u_masked: np.ndarray, rng, tau_factor: float) -> int:
    """Argmax selection, or a seeded draw over the tau-thresholded magnitudes."""
    mags = np.abs(u_masked)
    if rng is None:
        return int(np.argmax(mags))
    peak = float(mags.max())
    candidates = np.nonzero(mags >= tau_factor * peak)[0]
    return int(rng.choice(candidates, p=mags[candidates] / mags[candidates].sum()))


def _lgm_graph(tape: GradientTape, dicts, params: LgmParams, x: np.ndarray,
               config: PursuitConfig, att_leaves, rng, tau_factor: float) -> UnrolledTrace:
    d_a_eff, d_s_eff, weights = dicts
    n = params.n_features
    m = params.n_atoms
    s = config.max_cardinality
    if not 1 <= s <= m:
        raise ValueError(f"max_cardinality {s} must lie in [1, {m}]")
    with_attention = att_leaves is not None

    x_node = tape.constant(x)
    d_a_t = ad.transpose(d_a_eff)
    xnorm = float(np.linalg.norm(x))
    zero_tol = _ZERO_SCALE * max(1.0, xnorm)
    eps = config.residual_threshold if config.stop_mode == THRESHOLD_OR_MAX else None

    selected: list[int] = []
    blocked = np.zeros(m, dtype=bool)
    xhat_node = None
    alpha_node = None
    sub_a = None
    sub_s = None
    xhat_nodes: list[Node] = []
    res_nodes: list[Node] = []
    res_norms: list[float] = []

    stopped_early = (xnorm <= zero_tol) or (eps is not None and xnorm <= eps)
    layers = s if with_attention else (0 if stopped_early else s)
    for _ in range(layers):
        r_node = x_node if xhat_node is None else ad.sub(x_node, xhat_node)
        u_node = ad.mul(weights, ad.matmul(d_a_t, r_node))
        u_masked = u_node.value.copy()
        u_masked[blocked] = 0.0
        if np.all(u_masked == 0.0):
            if not with_attention:
                break
            # exact reconstruction reached: replicate the previous layer
            xhat_nodes.append(xhat_node if xhat_node is not None else tape.constant(np.zeros(n)))
            res_nodes.append(res_nodes[-1] if res_nodes
                             else tape.constant(x.copy()))
            selected.append(-1)
            res_norms.append(res_norms[-1] if res_norms else xnorm)
            xhat_node = xhat_nodes[-1]
            continue
        retried = False
        while True:
            i0 = _select_index(u_masked, rng, tau_factor)
            mask = np.ones(m)
            mask[blocked] = 0.0
            y_node = ad.mpt(ad.mul(u_node, tape.constant(mask)), index=i0)
            atom_a = ad.reshape(ad.atos(d_a_eff, y_node), (n, 1))
            atom_s = ad.reshape(ad.atos(d_s_eff, y_node), (n, 1))
            new_a = atom_a if sub_a is None else ad.concat_cols(sub_a, atom_a)
            new_s = atom_s if sub_s is None else ad.concat_cols(sub_s, atom_s)
            gram = ad.matmul(ad.transpose(new_a), new_a)
            try:
                gram_inv = ad.spd_inv(gram)
            except Exception as exc:
                from .errors import NotPositiveDefinite

                if not isinstance(exc, NotPositiveDefinite):
                    raise
                if retried:
                    raise RankDeficientSupport(
                        f"layer {len(selected) + 1}: degenerate support after retry") from exc
                blocked[i0] = True
                u_masked[i0] = 0.0
                retried = True
                if np.all(u_masked == 0.0):
                    raise RankDeficientSupport(
                        f"layer {len(selected) + 1}: no candidate atom left") from exc
                continue
            break
        sub_a, sub_s = new_a, new_s
        selected.append(i0)
        blocked[i0] = True
        alpha_node = ad.matmul(gram_inv, ad.matmul(ad.transpose(sub_a), x_node))
        xhat_node = ad.matmul(sub_s, alpha_node)
        r_after = ad.sub(x_node, xhat_node)
        rn = float(np.linalg.norm(r_after.value))
        xhat_nodes.append(xhat_node)
        res_nodes.append(r_after)
        res_norms.append(rn)
        if not with_attention and ((eps is not None and rn <= eps) or rn <= zero_tol):
            break

    att_weights = None
    if with_attention:
        res_stack = ad.stack_rows(res_nodes)
        weights_node = _attention_graph(res_stack, att_leaves, batched=False)
        att_weights = weights_node.value.copy()
        output_node = ad.matmul(ad.stack_cols(xhat_nodes), weights_node)
    else:
        output_node = xhat_node if xhat_node is not None else tape.constant(np.zeros(n))
    tape.mark_output(output_node)
    return UnrolledTrace(selected,
                         np.zeros(0) if alpha_node is None else alpha_node.value.copy(),
                         [node.value.copy() for node in xhat_nodes], res_norms,
                         output_node.value.copy(), att_weights, output_node)


def lgm_forward(params: LgmParams, x, config: PursuitConfig,
                attention: AttentionParams | None = None,
                tape: GradientTape | None = None,
                rng: np.random.Generator | None = None,
                tau_factor: float = 0.8) -> UnrolledTrace:
    """Unrolled greedy forward pass on a single signal.

    Without attention the layer count follows the stopping rule of
    ``config`` exactly as in the pursuit engine. With attention the network
    always runs ``config.max_cardinality`` layers and returns the
    softmax-weighted combination of the per-layer reconstructions; a layer
    whose masked correlations are all zero replicates its predecessor and
    records ``-1``.

    Passing ``rng`` switches the selection to a seeded draw over the
    ``tau_factor``-thresholded correlation magnitudes (randomized variant).
    A degenerate least-squares step masks the atom and retries once with the
    next-best candidate; a persistent failure raises RankDeficientSupport.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.n_features,):
        raise ShapeMismatch(f"signal shape {x.shape} != ({params.n_features},)")
    if attention is not None:
        if attention.signal_length != params.n_features:
            raise ShapeMismatch("attention signal length != feature count")
        if attention.depth != config.max_cardinality:
            raise ShapeMismatch(
                f"attention depth {attention.depth} != max_cardinality "
                f"{config.max_cardinality}")
    tape = tape if tape is not None else GradientTape()
    dicts = _lgm_leaves(tape, params)
    att_leaves = None if attention is None else _attention_leaves(tape, attention)
    return _lgm_graph(tape, dicts, params, x, config, att_leaves, rng, tau_factor)


def lgm_backward(tape: GradientTape, output_grad) -> dict[str, np.ndarray]:
    """Parameter gradients of a recorded forward pass.

    Seeds the recorded output with ``output_grad`` and reverse-traverses the
    tape; returns one gradient per registered parameter (zeros for
    parameters untouched by the realized depth).
    """
    if tape is None:
        raise TapeMissing("lgm_backward needs the tape recorded by the forward pass")
    tape.backward(np.asarray(output_grad, dtype=np.float64))
    return {name: tape.grad_of(name) for name in tape.params}


def lgm_mmse_forward(params: LgmParams, x, config: PursuitConfig, rand: RandConfig,
                     include_map: bool = True,
                     attention: AttentionParams | None = None,
                     tape: GradientTape | None = None) -> UnrolledTrace:
    """Average of randomized forward passes (draw i seeded ``rand.seed ^ i``),
    plus the deterministic pass when ``include_map`` is set.

    All runs share one set of parameter leaves, so backward through the
    averaged output accumulates gradients across runs. ``coeffs`` holds the
    averaged dense code.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.n_features,):
        raise ShapeMismatch(f"signal shape {x.shape} != ({params.n_features},)")
    tape = tape if tape is not None else GradientTape()
    dicts = _lgm_leaves(tape, params)
    att_leaves = None if attention is None else _attention_leaves(tape, attention)
    traces = []
    for i in range(rand.draws):
        rng = np.random.default_rng(rand.seed ^ i)
        traces.append(_lgm_graph(tape, dicts, params, x, config, att_leaves,
                                 rng, rand.tau_factor))
    if include_map:
        traces.append(_lgm_graph(tape, dicts, params, x, config, att_leaves, None,
                                 rand.tau_factor))
    total = None
    for trace in traces:
        total = trace.output_node if total is None else ad.add(total, trace.output_node)
    output_node = ad.mul(tape.constant(np.asarray(1.0 / len(traces))), total)
    tape.mark_output(output_node)

    dense = np.zeros(params.n_atoms)
    for trace in traces:
        run_dense = np.zeros(params.n_atoms)
        for idx, coeff in zip([i for i in trace.selected if i >= 0], trace.coeffs):
            run_dense[idx] = coeff
        dense += run_dense
    dense /= len(traces)
    return UnrolledTrace([], dense, [t.output for t in traces],
                         [t.residual_norms[-1] if t.residual_norms else float(np.linalg.norm(x))
                          for t in traces],
                         output_node.value.copy(), None, output_node)


# ---------------------------------------------------------------------------
# L-MP and L-SP

def lmp_forward(params: LgmParams, x, config: PursuitConfig,
                tape: GradientTape | None = None) -> UnrolledTrace:
    """Unrolled matching pursuit: coefficient accumulation, synthesis via D2.

    The code update keeps the full weighted-correlation peak as a value, so
    gradients flow through the coefficient path (unlike the LGM layer, where
    magnitudes cancel inside the atom extraction).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.n_features,):
        raise ShapeMismatch(f"signal shape {x.shape} != ({params.n_features},)")
    tape = tape if tape is not None else GradientTape()
    d_a_eff, d_s_eff, weights = _lgm_leaves(tape, params)
    n, m = params.n_features, params.n_atoms
    s = config.max_cardinality
    if not 1 <= s <= m:
        raise ValueError(f"max_cardinality {s} must lie in [1, {m}]")

    x_node = tape.constant(x)
    d_a_t = ad.transpose(d_a_eff)
    xnorm = float(np.linalg.norm(x))
    zero_tol = _ZERO_SCALE * max(1.0, xnorm)
    eps = config.residual_threshold if config.stop_mode == THRESHOLD_OR_MAX else None

    alpha_node = tape.constant(np.zeros(m))
    xhat_node = None
    selected: list[int] = []
    recons: list[np.ndarray] = []
    res_norms: list[float] = []
    if not (xnorm <= zero_tol or (eps is not None and xnorm <= eps)):
        for _ in range(s):
            r_node = x_node if xhat_node is None else ad.sub(x_node, xhat_node)
            u_node = ad.mul(weights, ad.matmul(d_a_t, r_node))
            if np.all(u_node.value == 0.0):
                break
            y_node = ad.mpt(u_node)
            selected.append(y_node.meta)
            alpha_node = ad.add(alpha_node, ad.mul(weights, y_node))
            xhat_node = ad.matmul(d_s_eff, alpha_node)
            rn = float(np.linalg.norm(x - xhat_node.value))
            recons.append(xhat_node.value.copy())
            res_norms.append(rn)
            if (eps is not None and rn <= eps) or rn <= zero_tol:
                break
    output_node = xhat_node if xhat_node is not None else tape.constant(np.zeros(n))
    tape.mark_output(output_node)
    support = []
    for i in selected:
        if i not in support:
            support.append(i)
    coeffs = alpha_node.value[support] if support else np.zeros(0)
    return UnrolledTrace(selected, coeffs, recons, res_norms,
                         output_node.value.copy(), None, output_node)


def lsp_forward(params: LgmParams, x, s: int, max_iterations: int = 50) -> UnrolledTrace:
    """Unrolled subspace pursuit (inference only, no tape).

    Selection/LS on the analysis dictionary, reconstruction through the
    synthesis dictionary; the initial estimate is the LS projection onto the
    ``s`` strongest correlations. Re-pruning scores ``|a_i| * ||d_i||``.
    Stops when the residual norm would increase (previous iterate returned)
    or after ``max_iterations`` rounds.
    """
    from .linalg import ls_solve

    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.n_features,):
        raise ShapeMismatch(f"signal shape {x.shape} != ({params.n_features},)")
    analysis = params.analysis.atoms
    synthesis = params.synthesis.atoms
    if params.use_dc:
        ones_col = np.ones((params.n_features, 1))
        analysis = np.concatenate([analysis, params.dc_scale_analysis * ones_col], axis=1)
        synthesis = np.concatenate([synthesis, params.dc_scale_synthesis * ones_col], axis=1)
    norms = np.sqrt(np.sum(analysis * analysis, axis=0))
    weights = 1.0 / norms
    if params.use_dc:
        weights[-1] = 1.0
    m = analysis.shape[1]
    if not 1 <= s <= m:
        raise ValueError(f"s must lie in [1, {m}]")

    xnorm = float(np.linalg.norm(x))
    zero_tol = _ZERO_SCALE * max(1.0, xnorm)
    if xnorm <= zero_tol:
        return UnrolledTrace([], np.zeros(0), [], [], np.zeros(params.n_features))

    def order_desc(values):
        return np.argsort(-values, kind="stable")

    u = weights * (analysis.T @ x)
    support = [int(i) for i in order_desc(np.abs(u))[:s]]
    coeffs = ls_solve(analysis[:, support], x)
    recon = synthesis[:, support] @ coeffs
    prev = float(np.linalg.norm(x - recon))
    recons = [recon.copy()]
    res_norms = [prev]

    for _ in range(max_iterations):
        if prev <= zero_tol:
            break
        r = x - recon
        u = weights * (analysis.T @ r)
        u[support] = 0.0
        mags = np.abs(u)
        candidates = [int(i) for i in order_desc(mags)[:s] if mags[i] > 0.0]
        if not candidates:
            break
        union = support + candidates
        trial = ls_solve(analysis[:, union], x)
        keep = order_desc(np.abs(trial) * norms[union])[:s]
        new_support = [union[int(i)] for i in keep]
        new_coeffs = ls_solve(analysis[:, new_support], x)
        new_recon = synthesis[:, new_support] @ new_coeffs
        rn = float(np.linalg.norm(x - new_recon))
        if rn > prev:
            break
        support, coeffs, recon, prev = new_support, new_coeffs, new_recon, rn
        recons.append(recon.copy())
        res_norms.append(rn)

    return UnrolledTrace(list(support), coeffs, recons, res_norms, recon.copy())


# ---------------------------------------------------------------------------
# LISTA

def lista_forward(params: ListaParams, x, tape: GradientTape | None = None) -> UnrolledTrace:
    """T soft-thresholded iterations; accepts a single signal or an (n, B) batch.

    ``coeffs`` holds the final code(s); reconstructions record each
    iteration's ``D2 a_t``. With tensors tied to a dictionary this coincides
    with plain ISTA.
    """
    x = np.asarray(x, dtype=np.float64)
    n, m = params.d1.shape
    if x.shape[0] != n or x.ndim not in (1, 2):
        raise ShapeMismatch(f"signal shape {x.shape} incompatible with D1 {params.d1.shape}")
    tape = tape if tape is not None else GradientTape()
    w = tape.leaf(params.w, name="w")
    d1 = tape.leaf(params.d1, name="d1")
    d2 = tape.leaf(params.d2, name="d2")
    theta = tape.leaf(params.theta, name="theta")
    x_node = tape.constant(x)

    alpha = tape.constant(np.zeros(m) if x.ndim == 1 else np.zeros((m, x.shape[1])))
    recons = []
    for _ in range(params.iterations):
        pre = ad.add(alpha, ad.matmul(w, ad.sub(x_node, ad.matmul(d1, alpha))))
        alpha = ad.soft_threshold(pre, theta)
        recons.append((params.d2 @ alpha.value))
    output_node = ad.matmul(d2, alpha)
    tape.mark_output(output_node)
    return UnrolledTrace([], alpha.value.copy(), recons, [],
                         output_node.value.copy(), None, output_node)


# ---------------------------------------------------------------------------
# batched per-patch LGM (fixed depth, shared parameters)

def lgm_forward_patches(params: LgmParams, signals, s: int,
                        attention: AttentionParams | None = None,
                        tape: GradientTape | None = None):
    """Fixed-depth LGM over an ``(n, P)`` batch of signals at once.

    Always runs ``s`` layers (the attention regime); per-patch supports stay
    unique via masking. Returns ``(output, aux)`` where ``output`` is the
    recorded output node (value shape ``(n, P)``) and ``aux`` carries the
    per-patch selections and attention weights. Matches per-signal
    ``lgm_forward`` layer for layer on nondegenerate inputs.

    A patch whose Gram loses positive definiteness retries once with its
    next-best atom; a persistent failure raises RankDeficientSupport.
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2 or signals.shape[0] != params.n_features:
        raise ShapeMismatch(
            f"signals shape {signals.shape} incompatible with {params.n_features} features")
    npatch = signals.shape[1]
    m = params.n_atoms
    if not 1 <= s <= m:
        raise ValueError(f"s must lie in [1, {m}]")
    if attention is not None and attention.depth != s:
        raise ShapeMismatch(f"attention depth {attention.depth} != s {s}")
    tape = tape if tape is not None else GradientTape()
    d_a_eff, d_s_eff, weights_node = _lgm_leaves(tape, params)
    att_leaves = None if attention is None else _attention_leaves(tape, attention)

    x_node = tape.constant(signals)
    d_a_t = ad.transpose(d_a_eff)
    w_col = ad.reshape(weights_node, (m, 1))

    blocked = np.zeros((m, npatch), dtype=bool)
    stack_a = None
    stack_s = None
    xhat_node = None
    selections = np.empty((s, npatch), dtype=np.intp)
    xhat_nodes: list[Node] = []
    res_nodes: list[Node] = []

    for layer in range(s):
        r_node = x_node if xhat_node is None else ad.sub(x_node, xhat_node)
        u_node = ad.mul(w_col, ad.matmul(d_a_t, r_node))
        u_masked = np.where(blocked, 0.0, u_node.value)
        # zero columns (exact fits) fall back to the first unblocked atom;
        # its LS coefficient is zero, so the reconstruction is unaffected
        idx = np.argmax(np.abs(u_masked), axis=0)
        zero_cols = np.nonzero(np.abs(u_masked[idx, np.arange(npatch)]) == 0.0)[0]
        for col in zero_cols:
            free = np.nonzero(~blocked[:, col])[0]
            idx[col] = free[0] if free.size else 0
        retried = False
        while True:
            atoms_a = signalsel = params_analysis = None  # readability only
            trial_a = (np.concatenate(
                [stack_a.value, d_a_eff.value[:, idx].T[:, :, None]], axis=2)
                if stack_a is not None else d_a_eff.value[:, idx].T[:, :, None])
            gram = np.einsum("pnk,pnl->pkl", trial_a, trial_a, optimize=True)
            try:
                ad.batched_cholesky(gram)
            except RankDeficientSupport as exc:
                bad = exc.bad_indices
                if retried:
                    raise RankDeficientSupport(
                        f"layer {layer + 1}: {bad.size} patch(es) degenerate after retry"
                    ) from exc
                for col in bad:
                    blocked[idx[col], col] = True
                    u_masked[idx[col], col] = 0.0
                    free_mags = np.abs(u_masked[:, col])
                    if free_mags.max() > 0.0:
                        idx[col] = int(np.argmax(free_mags))
                    else:
                        free = np.nonzero(~blocked[:, col])[0]
                        if free.size == 0:
                            raise RankDeficientSupport(
                                f"layer {layer + 1}: patch {col} has no candidates") from exc
                        idx[col] = free[0]
                retried = True
                continue
            break
        selections[layer] = idx
        blocked[idx, np.arange(npatch)] = True
        atoms_a = ad.take_cols(d_a_eff, idx)
        atoms_s = ad.take_cols(d_s_eff, idx)
        stack_a = ad.append_atom(stack_a, atoms_a)
        stack_s = ad.append_atom(stack_s, atoms_s)
        alpha = ad.batched_ls(stack_a, x_node)
        xhat_node = ad.bmm_vec(stack_s, alpha)
        xhat_nodes.append(xhat_node)
        res_nodes.append(ad.sub(x_node, xhat_node))

    att_weights = None
    if att_leaves is not None:
        res_stack = ad.stack_layers(res_nodes)
        weights = _attention_graph(res_stack, att_leaves, batched=True)
        att_weights = weights.value.copy()
        output_node = ad.weighted_sum_layers(weights, ad.stack_layers(xhat_nodes))
    else:
        output_node = xhat_node
    tape.mark_output(output_node)
    aux = {"selections": selections, "attention_weights": att_weights}
    return output_node, aux


# ---------------------------------------------------------------------------
# checkpoints: one file, JSON header line + raw little-endian float64 payloads

def save_checkpoint(path, kind: str, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write named tensors to one binary file; round trips are bit-exact."""
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = np.atleast_2d(np.asarray(value, dtype=np.float64))
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "rows": int(arr.shape[0]), "cols": int(arr.shape[1]),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"kind": kind, "dtype": "f64", "byte_order": "little",
              "tensors": entries, "meta": meta or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (kind, tensors, meta). Raises CorruptHeader."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CorruptHeader(f"unreadable checkpoint header in {path}: {exc}") from exc
        payload = fh.read()
    try:
        kind = header["kind"]
        entries = header["tensors"]
        meta = header.get("meta", {})
        if header["dtype"] != "f64" or header["byte_order"] != "little":
            raise CorruptHeader(f"unsupported checkpoint encoding in {path}")
        tensors = {}
        for entry in entries:
            start, nbytes = entry["offset"], entry["nbytes"]
            rows, cols = entry["rows"], entry["cols"]
            if nbytes != rows * cols * 8 or start + nbytes > len(payload):
                raise CorruptHeader(f"tensor {entry['name']} payload out of bounds in {path}")
            tensors[entry["name"]] = np.frombuffer(
                payload[start:start + nbytes], dtype="<f8").reshape(rows, cols).astype(np.float64)
    except (KeyError, TypeError) as exc:
        raise CorruptHeader(f"checkpoint header in {path} missing fields: {exc}") from exc
    return kind, tensors, meta


def save_lgm_checkpoint(path, params: LgmParams,
                        attention: AttentionParams | None = None,
                        meta: dict | None = None) -> None:
    tensors = dict(params.tensors())
    if attention is not None:
        tensors.update(attention.tensors())
    full_meta = {"use_dc": params.use_dc, "has_attention": attention is not None,
                 "attention_depth": attention.depth if attention is not None else 0}
    full_meta.update(meta or {})
    save_checkpoint(path, "lgm", tensors, full_meta)


def load_lgm_checkpoint(path) -> tuple[LgmParams, AttentionParams | None, dict]:
    kind, tensors, meta = load_checkpoint(path)
    if kind != "lgm":
        raise CorruptHeader(f"expected an lgm checkpoint, found kind {kind!r}")
    dc_a = tensors["dc_analysis"].item() if meta.get("use_dc") else None
    dc_s = tensors["dc_synthesis"].item() if meta.get("use_dc") else None
    params = LgmParams(Dictionary(tensors["analysis"]), Dictionary(tensors["synthesis"]),
                       dc_a, dc_s)
    attention = None
    if meta.get("has_attention"):
        restored = {}
        for name, value in tensors.items():
            if name.startswith("att_b_"):
                restored[name] = value.ravel()
            elif name.startswith("att_"):
                restored[name] = value
        attention = AttentionParams(
            [restored[f"att_w1_{k}"] for k in range(_N_BLOCKS)],
            [restored[f"att_w2_{k}"] for k in range(_N_BLOCKS)],
            [restored[f"att_b_{k}"] for k in range(_N_BLOCKS)],
            restored["att_wout"])
    return params, attention, meta


def save_lista_checkpoint(path, params: ListaParams, meta: dict | None = None) -> None:
    full_meta = {"iterations": params.iterations}
    full_meta.update(meta or {})
    save_checkpoint(path, "lista", params.tensors(), full_meta)


def load_lista_checkpoint(path) -> tuple[ListaParams, dict]:
    kind, tensors, meta = load_checkpoint(path)
    if kind != "lista":
        raise CorruptHeader(f"expected a lista checkpoint, found kind {kind!r}")
    params = ListaParams(tensors["w"], tensors["d1"], tensors["d2"],
                         tensors["theta"].ravel(), int(meta["iterations"]))
    return params, meta
