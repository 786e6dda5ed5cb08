"""Minimal reverse-mode automatic differentiation on numpy arrays.

A GradientTape records operations as they execute. Nodes are appended in
execution order, which is already a topological order, so the backward pass
is a single reverse sweep. Each node caches its value and keeps a forward
closure, so ``replay`` can recompute the recorded graph bit-exactly.

Only the operations the unrolled networks need are provided. Selection
indices (argmax choices) are computed from values and treated as constants
of the recorded graph: gradients flow through the surviving entries only.
Sibling modules can register custom differentiable ops through ``apply``.
"""

from __future__ import annotations

import numpy as np

from . import linalg
from .errors import AllZeroInput, RankDeficientSupport, ShapeMismatch, TapeMissing, ZeroAtom


class Node:
    """One recorded value. ``vjp(grad_out)`` returns per-parent gradients."""

    __slots__ = ("value", "parents", "vjp", "fwd", "requires_grad", "grad", "tape", "meta")

    def __init__(self, value, parents, fwd, requires_grad, tape):
        self.value = value
        self.parents = parents
        self.fwd = fwd
        self.vjp = None
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = tape
        self.meta = None

    @property
    def shape(self):
        return self.value.shape


class GradientTape:
    """Ordered record of operations with cached intermediates."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.output: Node | None = None

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), (), None, requires_grad, self)
        self.nodes.append(node)
        if name is not None:
            self.params[name] = node
        return node

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def mark_output(self, node: Node) -> None:
        self.output = node

    def replay(self):
        """Recompute every recorded node from the leaves; bit-exact by construction."""
        for node in self.nodes:
            if node.fwd is not None:
                node.value = node.fwd(*[p.value for p in node.parents])
        return None if self.output is None else self.output.value

    def backward(self, seed, root: Node | None = None) -> None:
        """Reverse sweep from ``root`` (default: the marked output)."""
        root = root if root is not None else self.output
        if root is None:
            raise TapeMissing("no output recorded on this tape")
        if root.tape is not self:
            raise ValueError("root node belongs to a different tape")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.value.shape:
            raise ShapeMismatch(f"seed shape {seed.shape} != output shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = seed
        for node in reversed(self.nodes):
            if node.grad is None or not node.parents or not node.requires_grad:
                continue
            for parent, grad in zip(node.parents, node.vjp(node.grad)):
                if grad is None or not parent.requires_grad:
                    continue
                parent.grad = grad if parent.grad is None else parent.grad + grad

    def grad_of(self, name: str):
        """Gradient of a registered parameter; zeros if it never received one."""
        node = self.params[name]
        return np.zeros_like(node.value) if node.grad is None else node.grad


def _tape_of(*args) -> GradientTape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TapeMissing("at least one operand must be a tape-recorded Node")


def _lift(tape: GradientTape, a) -> Node:
    if isinstance(a, Node):
        if a.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return a
    return tape.constant(a)


def apply(fwd, *parents, name: str = "custom") -> Node:
    """Record ``fwd(*parent_values)``; caller must then set ``node.vjp``."""
    tape = _tape_of(*parents)
    parents = tuple(_lift(tape, p) for p in parents)
    value = fwd(*[p.value for p in parents])
    node = Node(np.asarray(value, dtype=np.float64), parents, fwd,
                any(p.requires_grad for p in parents), tape)
    tape.nodes.append(node)
    return node


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a, b):
    out = apply(np.add, a, b)
    pa, pb = out.parents
    out.vjp = lambda g: (_unbroadcast(g, pa.value.shape), _unbroadcast(g, pb.value.shape))
    return out


def sub(a, b):
    out = apply(np.subtract, a, b)
    pa, pb = out.parents
    out.vjp = lambda g: (_unbroadcast(g, pa.value.shape), _unbroadcast(-g, pb.value.shape))
    return out


def mul(a, b):
    out = apply(np.multiply, a, b)
    pa, pb = out.parents
    out.vjp = lambda g: (_unbroadcast(g * pb.value, pa.value.shape),
                         _unbroadcast(g * pa.value, pb.value.shape))
    return out


def neg(a):
    out = apply(np.negative, a)
    out.vjp = lambda g: (-g,)
    return out


def transpose(a):
    out = apply(lambda v: v.T, a)
    out.vjp = lambda g: (g.T,)
    return out


def reshape(a, shape):
    shape = tuple(shape)
    orig = a.value.shape if isinstance(a, Node) else np.asarray(a).shape
    out = apply(lambda v: v.reshape(shape), a)
    out.vjp = lambda g: (g.reshape(orig),)
    return out


def matmul(a, b):
    out = apply(np.matmul, a, b)
    pa, pb = out.parents

    def vjp(g):
        av, bv = pa.value, pb.value
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av  # 1-D inner product

    out.vjp = vjp
    return out


def concat_cols(a, b):
    """Column-concatenate two 2-D blocks."""
    out = apply(lambda x, y: np.concatenate([x, y], axis=1), a, b)
    k = out.parents[0].value.shape[1]
    out.vjp = lambda g: (g[:, :k], g[:, k:])
    return out


def _stack(nodes, build, split):
    out = apply(lambda *vals: build(vals), *nodes)
    out.vjp = lambda g: tuple(split(g, i) for i in range(len(out.parents)))
    return out


def stack_rows(nodes):
    """Stack 1-D vectors as the rows of a 2-D matrix."""
    return _stack(nodes, lambda vals: np.stack(vals, axis=0), lambda g, i: g[i])


def stack_cols(nodes):
    """Stack 1-D vectors as the columns of a 2-D matrix."""
    return _stack(nodes, lambda vals: np.stack(vals, axis=1), lambda g, i: g[:, i])


def stack_layers(nodes):
    """Stack per-layer ``(n, P)`` blocks into a ``(P, layers, n)`` tensor."""
    return _stack(nodes, lambda vals: np.stack([v.T for v in vals], axis=1),
                  lambda g, i: g[:, i, :].T)


def relu(a):
    out = apply(lambda v: np.maximum(v, 0.0), a)
    pa = out.parents[0]
    out.vjp = lambda g: (g * (pa.value > 0.0),)
    return out


def softmax(a, axis=-1):
    def fwd(v):
        e = np.exp(v - v.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    out = apply(fwd, a)
    out.vjp = lambda g: (out.value * (g - (g * out.value).sum(axis=axis, keepdims=True)),)
    return out


def sum_all(a):
    out = apply(np.sum, a)
    pa = out.parents[0]
    out.vjp = lambda g: (np.broadcast_to(g, pa.value.shape).copy(),)
    return out


def sum_sq(a):
    """Scalar sum of squared entries."""
    out = apply(lambda v: np.sum(v * v), a)
    pa = out.parents[0]
    out.vjp = lambda g: (2.0 * g * pa.value,)
    return out


def log(a):
    out = apply(np.log, a)
    pa = out.parents[0]
    out.vjp = lambda g: (g / pa.value,)
    return out


def soft_threshold(v, theta):
    """Elementwise shrinkage sign(v) * max(|v| - theta, 0); theta broadcasts over columns."""

    def fwd(vv, tt):
        t = tt if vv.ndim == 1 else tt[:, None]
        return np.sign(vv) * np.maximum(np.abs(vv) - t, 0.0)

    out = apply(fwd, v, theta)
    pv, pt = out.parents

    def vjp(g):
        vv, tt = pv.value, pt.value
        t = tt if vv.ndim == 1 else tt[:, None]
        active = np.abs(vv) > t
        gv = g * active
        gt = -np.sign(vv) * g * active
        if vv.ndim > 1:
            gt = gt.sum(axis=tuple(range(1, vv.ndim)))
        return gv, gt

    out.vjp = vjp
    return out


# ---------------------------------------------------------------------------
# selection ops (indices are constants of the recorded graph)

def mpt(u, index=None):
    """Keep only the largest-magnitude entry (ties: lowest index).

    ``index`` overrides the argmax (randomized selection records the drawn
    index so replay stays deterministic). ``node.meta`` holds the surviving
    index. A zero vector keeps index 0 with value zero.
    """

    def fwd(v):
        i0 = int(np.argmax(np.abs(v))) if index is None else int(index)
        out = np.zeros_like(v)
        out[i0] = v[i0]
        return out

    out = apply(fwd, u)
    v0 = out.parents[0].value
    out.meta = int(np.argmax(np.abs(v0))) if index is None else int(index)

    def vjp(g):
        gu = np.zeros_like(out.parents[0].value)
        gu[out.meta] = g[out.meta]
        return (gu,)

    out.vjp = vjp
    return out


def mpt_cols(u):
    """Column-wise mpt on a ``(m, P)`` matrix; ``meta`` holds the index array."""

    def fwd(v):
        idx = np.argmax(np.abs(v), axis=0)
        out = np.zeros_like(v)
        cols = np.arange(v.shape[1])
        out[idx, cols] = v[idx, cols]
        return out

    out = apply(fwd, u)
    out.meta = np.argmax(np.abs(out.parents[0].value), axis=0)

    def vjp(g):
        gu = np.zeros_like(out.parents[0].value)
        cols = np.arange(gu.shape[1])
        gu[out.meta, cols] = g[out.meta, cols]
        return (gu,)

    out.vjp = vjp
    return out


def atos(d, y):
    """Atom extraction ``D |y| / max|y|`` for a single-nonzero ``y``.

    Gradients flow into the selected column of ``D``; the value path through
    ``y`` is locally constant (the normalization cancels the magnitude), so
    its gradient is exactly zero. Raises AllZeroInput when ``y`` is all zero.
    """

    def fwd(dv, yv):
        peak = np.max(np.abs(yv))
        if peak == 0.0:
            raise AllZeroInput("atos needs a nonzero selection vector")
        return dv @ (np.abs(yv) / peak)

    out = apply(fwd, d, y)
    pd, py = out.parents

    def vjp(g):
        yv = py.value
        return np.outer(g, np.abs(yv) / np.max(np.abs(yv))), np.zeros_like(yv)

    out.vjp = vjp
    return out


def take_cols(d, idx):
    """Gather columns ``D[:, idx]``; the vjp scatter-adds back (duplicates sum)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = apply(lambda dv: dv[:, idx], d)
    pd = out.parents[0]

    def vjp(g):
        gd = np.zeros_like(pd.value)
        np.add.at(gd, (slice(None), idx), g)
        return (gd,)

    out.vjp = vjp
    return out


def inv_col_norms(d, unit_index=None):
    """Reciprocal column norms ``1/||d_j||``; ``unit_index`` is pinned to 1 (no grad)."""

    def fwd(dv):
        norms = np.sqrt(np.sum(dv * dv, axis=0))
        check = np.delete(norms, unit_index) if unit_index is not None else norms
        if np.any(check == 0.0):
            raise ZeroAtom("dictionary has a zero column")
        w = np.empty_like(norms)
        nz = norms > 0.0
        w[nz] = 1.0 / norms[nz]
        w[~nz] = 1.0
        if unit_index is not None:
            w[unit_index] = 1.0
        return w

    out = apply(fwd, d)
    pd = out.parents[0]

    def vjp(g):
        w = out.value
        scale = -g * w ** 3
        if unit_index is not None:
            scale = scale.copy()
            scale[unit_index] = 0.0
        return (pd.value * scale,)

    out.vjp = vjp
    return out


def spd_inv(g_node):
    """Inverse of a symmetric positive-definite matrix; vjp uses linalg.inverse_gradient."""
    out = apply(linalg.spd_inverse, g_node)
    out.vjp = lambda g: (linalg.inverse_gradient(out.value, g),)
    return out


# ---------------------------------------------------------------------------
# batched (per-patch) ops. Batch tensors are (P, n, k); signals are (n, P).

def left_mm(w, m):
    """Apply a shared matrix on the left of each batch slice: (i,j),(P,j,k)->(P,i,k)."""
    out = apply(lambda wv, mv: np.einsum("ij,pjk->pik", wv, mv, optimize=True), w, m)
    pw, pm = out.parents
    out.vjp = lambda g: (np.einsum("pik,pjk->ij", g, pm.value, optimize=True),
                         np.einsum("ij,pik->pjk", pw.value, g, optimize=True))
    return out


def right_mm(m, w):
    """Apply a shared matrix on the right of each batch slice: (P,i,j),(j,k)->(P,i,k)."""
    out = apply(lambda mv, wv: np.einsum("pij,jk->pik", mv, wv, optimize=True), m, w)
    pm, pw = out.parents
    out.vjp = lambda g: (np.einsum("pik,jk->pij", g, pw.value, optimize=True),
                         np.einsum("pij,pik->jk", pm.value, g, optimize=True))
    return out


def append_atom(stack, atoms):
    """Append per-patch atom columns ``(n, P)`` to a ``(P, n, k)`` stack (or start one)."""
    if stack is None:
        out = apply(lambda av: av.T[:, :, None], atoms)
        out.vjp = lambda g: (g[:, :, 0].T,)
        return out
    k = stack.value.shape[2]
    out = apply(lambda sv, av: np.concatenate([sv, av.T[:, :, None]], axis=2), stack, atoms)
    out.vjp = lambda g: (g[:, :, :k], g[:, :, k].T)
    return out


def bmm_vec(stack, coeffs):
    """Per-patch reconstruction: (P,n,k) @ (P,k) -> (n,P)."""
    out = apply(lambda sv, cv: np.einsum("pnk,pk->np", sv, cv, optimize=True), stack, coeffs)
    ps, pc = out.parents
    out.vjp = lambda g: (np.einsum("np,pk->pnk", g, pc.value, optimize=True),
                         np.einsum("pnk,np->pk", ps.value, g, optimize=True))
    return out


def weighted_sum_layers(weights, stack):
    """Convex combination over the layer axis: (P,s),(P,s,n) -> (n,P)."""
    out = apply(lambda wv, sv: np.einsum("ps,psn->np", wv, sv, optimize=True), weights, stack)
    pw, ps = out.parents
    out.vjp = lambda g: (np.einsum("np,psn->ps", g, ps.value, optimize=True),
                         np.einsum("ps,np->psn", pw.value, g, optimize=True))
    return out


def batched_cholesky(grams):
    """Cholesky of a stack of SPD matrices ``(P, k, k)`` with the shared pivot tolerance.

    Raises RankDeficientSupport carrying ``bad_indices`` (patches whose pivot
    failed) so callers can re-select atoms for just those patches.
    """
    g = np.asarray(grams, dtype=np.float64)
    npatch, k, _ = g.shape
    low = np.zeros_like(g)
    bad = np.zeros(npatch, dtype=bool)
    for j in range(k):
        pivot = g[:, j, j] - np.einsum("pi,pi->p", low[:, j, :j], low[:, j, :j])
        bad |= pivot <= linalg.PIVOT_TOL
        pivot = np.where(pivot <= linalg.PIVOT_TOL, 1.0, pivot)
        low[:, j, j] = np.sqrt(pivot)
        if j + 1 < k:
            low[:, j + 1:, j] = (g[:, j + 1:, j]
                                 - np.einsum("pik,pk->pi", low[:, j + 1:, :j], low[:, j, :j]))
            low[:, j + 1:, j] /= low[:, j, j][:, None]
    if bad.any():
        err = RankDeficientSupport(f"{int(bad.sum())} patch Gram(s) lost positive definiteness")
        err.bad_indices = np.nonzero(bad)[0]
        raise err
    return low


def batched_chol_solve(low, rhs):
    """Solve ``(L L^T) z = rhs`` for each patch; ``low`` (P,k,k), ``rhs`` (P,k)."""
    k = low.shape[1]
    z = np.array(rhs, dtype=np.float64, copy=True)
    for i in range(k):
        if i:
            z[:, i] -= np.einsum("pj,pj->p", low[:, i, :i], z[:, :i])
        z[:, i] /= low[:, i, i]
    for i in range(k - 1, -1, -1):
        if i + 1 < k:
            z[:, i] -= np.einsum("pj,pj->p", low[:, i + 1:, i], z[:, i + 1:])
        z[:, i] /= low[:, i, i]
    return z


def batched_ls(stack, signals):
    """Per-patch least squares ``argmin_a ||x_p - A_p a||`` as one fused op.

    ``stack`` is (P,n,k), ``signals`` (n,P); returns coefficients (P,k).
    Factorizations use the shared pivot tolerance; failures raise
    RankDeficientSupport with ``bad_indices`` before anything is recorded.
    """

    def fwd(sv, xv):
        gram = np.einsum("pnk,pnl->pkl", sv, sv, optimize=True)
        rhs = np.einsum("pnk,np->pk", sv, xv, optimize=True)
        return batched_chol_solve(batched_cholesky(gram), rhs)

    out = apply(fwd, stack, signals)
    ps, px = out.parents

    def vjp(g):
        sv, xv = ps.value, px.value
        gram = np.einsum("pnk,pnl->pkl", sv, sv, optimize=True)
        v = batched_chol_solve(batched_cholesky(gram), g)
        alpha = out.value
        # A_bar = A(G_bar + G_bar^T) + x b_bar^T with G_bar = -v alpha^T, b_bar = v
        gbar = -(v[:, :, None] * alpha[:, None, :])
        gbar = gbar + gbar.transpose(0, 2, 1)
        gs = (np.einsum("pnl,plk->pnk", sv, gbar, optimize=True)
              + np.einsum("np,pk->pnk", xv, v, optimize=True))
        gx = np.einsum("pnk,pk->np", sv, v, optimize=True)
        return gs, gx

    out.vjp = vjp
    return out
