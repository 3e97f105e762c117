"""Reverse-mode differentiation over the kernel op set.

Two interchangeable backends expose the same primitive vocabulary, so model
forward passes are written once and run either directly (`NumpyOps`) or
recorded (`Tape`) for gradients:

    matmul, add, add_bias, scale_shift, silu, layer_norm, softmax_rows,
    attention (the masked-attention composite), concat_rows, slice_rows,
    scale, mse

Attention is differentiated as a single composite: positions outside the
allowed blocks are never computed, so they receive zero gradient by
construction. Softmax backward uses y * (g - <g, y>) per row rather than a
materialized Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk


# ---------------------------------------------------------------------------
# Shared attention core: softmax(Q Kᵀ / sqrt(d_k)) V per head, where K/V are
# row-concatenations of the given segments. Queries attend to everything
# passed in; restricting what is passed in realizes the block mask.
# ---------------------------------------------------------------------------

def attention_core(q, ks, vs, heads: int):
    """Multi-head attention of q over concatenated key/value segments.

    One checked composite: per-head logits at 1/sqrt(d_k) scale, stabilized
    softmax, value products. Returns (out, weights (heads, n_q, n_k)).
    """
    q = nk.as_tensor(q)
    ks = [nk.as_tensor(k) for k in ks]
    vs = [nk.as_tensor(v) for v in vs]
    if len(ks) != len(vs) or not ks:
        raise nk.ShapeError("attention needs matching non-empty K/V segment lists")
    d = q.shape[1]
    if d % heads != 0:
        raise nk.ShapeError(f"width {d} not divisible by {heads} heads")
    for k, v in zip(ks, vs):
        if k.shape[1] != d or v.shape[1] != d or k.shape[0] != v.shape[0]:
            raise nk.ShapeError("K/V segments must match the query width")
    dk = d // heads
    inv_sqrt_dk = 1.0 / np.sqrt(dk)
    k_full = np.vstack(ks) if len(ks) > 1 else ks[0]
    v_full = np.vstack(vs) if len(vs) > 1 else vs[0]
    n_q, n_k = q.shape[0], k_full.shape[0]
    out = np.empty_like(q)
    weights = np.empty((heads, n_q, n_k), dtype=q.dtype)
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        logits = q[:, sl] @ k_full[:, sl].T
        logits *= inv_sqrt_dk
        np.subtract(logits, logits.max(axis=1, keepdims=True), out=logits)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        weights[h] = logits
        out[:, sl] = logits @ v_full[:, sl]
        nk.record_kernel("matmul")
        nk.record_kernel("matmul")
        nk.record_kernel("softmax_rows")
    return nk.check_finite(out, "attention"), weights


# ---------------------------------------------------------------------------
# Direct (inference) backend
# ---------------------------------------------------------------------------

class NumpyOps:
    """Executes the primitive vocabulary eagerly on ndarrays."""

    tape = False

    def leaf(self, value, name: str | None = None):
        return nk.as_tensor(value)

    def value(self, handle):
        return handle

    def matmul(self, a, b):
        return nk.matmul(a, b)

    def add(self, a, b):
        a, b = nk.as_tensor(a), nk.as_tensor(b)
        if a.shape != b.shape:
            raise nk.ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
        return nk.check_finite(a + b, "add")

    def add_bias(self, x, bias):
        x, bias = nk.as_tensor(x), nk.as_tensor(bias)
        if bias.shape != (x.shape[-1],):
            raise nk.ShapeError(f"bias shape {bias.shape} does not match {x.shape}")
        return nk.check_finite(x + bias, "add_bias")

    def scale_shift(self, x, scale, shift):
        x, scale, shift = nk.as_tensor(x), nk.as_tensor(scale), nk.as_tensor(shift)
        return nk.check_finite(x * (1.0 + scale) + shift, "scale_shift")

    def silu(self, x):
        return nk.silu(x)

    def layer_norm(self, x, gain, bias):
        return nk.layer_norm(x, gain, bias)

    def softmax_rows(self, x):
        return nk.softmax_rows(x)

    def attention(self, q, ks, vs, heads: int):
        out, _ = attention_core(q, ks, vs, heads)
        return out

    def concat_rows(self, xs):
        return np.vstack([nk.as_tensor(x) for x in xs])

    def slice_rows(self, x, start: int, stop: int):
        return nk.as_tensor(x)[start:stop]

    def scale(self, x, c: float):
        return nk.as_tensor(x) * c

    def mse(self, pred, target):
        pred, target = nk.as_tensor(pred), nk.as_tensor(target)
        if pred.shape != target.shape:
            raise nk.ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
        return np.mean((pred - target) ** 2)


# ---------------------------------------------------------------------------
# Recording backend
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    aux: dict = field(default_factory=dict)
    name: str | None = None


class Tape:
    """Append-only op record; append order is the topological order."""

    tape = True

    def __init__(self):
        self.nodes: list[Node] = []

    # -- recording ---------------------------------------------------------

    def leaf(self, value, name: str | None = None) -> int:
        self.nodes.append(Node("leaf", (), nk.as_tensor(value), name=name))
        return len(self.nodes) - 1

    def record(self, op: str, inputs: tuple[int, ...], **aux) -> int:
        """Record one primitive: computes and stores its forward value."""
        if op not in _FORWARD:
            raise ValueError(f"unknown primitive {op!r}")
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise ValueError(f"input node {i} not on tape")
        vals = [self.nodes[i].value for i in inputs]
        value, saved = _FORWARD[op](vals, aux)
        node = Node(op, tuple(inputs), value, aux)
        node.aux["_saved"] = saved
        self.nodes.append(node)
        return len(self.nodes) - 1

    def value(self, idx: int) -> np.ndarray:
        return self.nodes[idx].value

    # convenience wrappers matching NumpyOps

    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def add(self, a, b):
        return self.record("add", (a, b))

    def add_bias(self, x, bias):
        return self.record("add_bias", (x, bias))

    def scale_shift(self, x, scale, shift):
        return self.record("scale_shift", (x, scale, shift))

    def silu(self, x):
        return self.record("silu", (x,))

    def layer_norm(self, x, gain, bias):
        return self.record("layer_norm", (x, gain, bias))

    def softmax_rows(self, x):
        return self.record("softmax_rows", (x,))

    def attention(self, q, ks, vs, heads: int):
        return self.record("attention", (q, *ks, *vs), heads=heads, n_seg=len(ks))

    def concat_rows(self, xs):
        return self.record("concat_rows", tuple(xs))

    def slice_rows(self, x, start: int, stop: int):
        return self.record("slice_rows", (x,), start=start, stop=stop)

    def scale(self, x, c: float):
        return self.record("scale", (x,), c=c)

    def mse(self, pred, target):
        return self.record("mse", (pred, target))

    # -- execution ---------------------------------------------------------

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; stored values are untouched."""
        vals: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                vals.append(node.value)
            else:
                v, _ = _FORWARD[node.op]([vals[i] for i in node.inputs], node.aux)
                vals.append(v)
        return vals

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Gradients of the scalar at node `loss` w.r.t. every leaf.

        Visits each node exactly once in reverse append order; stored forward
        values are never mutated, so repeated calls return identical results.
        """
        if self.nodes[loss].value.size != 1:
            raise ValueError("backward requires a scalar loss node")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss] = np.ones_like(self.nodes[loss].value)
        for idx in range(loss, -1, -1):
            node = self.nodes[idx]
            g = grads[idx]
            if g is None or node.op == "leaf":
                continue
            in_vals = [self.nodes[i].value for i in node.inputs]
            in_grads = _BACKWARD[node.op](g, node.value, in_vals, node.aux)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        return {
            i: grads[i]
            for i, node in enumerate(self.nodes)
            if node.op == "leaf" and grads[i] is not None
        }


# ---------------------------------------------------------------------------
# Forward/backward rules
# ---------------------------------------------------------------------------

def _fwd_matmul(vals, aux):
    return nk.matmul(vals[0], vals[1]), None


def _bwd_matmul(g, y, vals, aux):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _fwd_add(vals, aux):
    if vals[0].shape != vals[1].shape:
        raise nk.ShapeError(f"add shapes differ: {vals[0].shape} vs {vals[1].shape}")
    return vals[0] + vals[1], None


def _bwd_add(g, y, vals, aux):
    return [g, g]


def _fwd_add_bias(vals, aux):
    x, b = vals
    if b.shape != (x.shape[-1],):
        raise nk.ShapeError(f"bias shape {b.shape} does not match {x.shape}")
    return x + b, None


def _bwd_add_bias(g, y, vals, aux):
    return [g, g.sum(axis=0)]


def _fwd_scale_shift(vals, aux):
    x, scale, shift = vals
    return x * (1.0 + scale) + shift, None


def _bwd_scale_shift(g, y, vals, aux):
    x, scale, _ = vals
    return [
        g * (1.0 + scale),
        (g * x).sum(axis=0, keepdims=True),
        g.sum(axis=0, keepdims=True),
    ]


def _fwd_silu(vals, aux):
    s = nk.sigmoid(vals[0])
    return vals[0] * s, s


def _bwd_silu(g, y, vals, aux):
    x = vals[0]
    s = nk.sigmoid(x)
    return [g * s * (1.0 + x * (1.0 - s))]


def _fwd_layer_norm(vals, aux):
    x, gain, bias = vals
    xhat, inv_std = nk.normalize_rows(x)
    return xhat * gain + bias, (xhat, inv_std)


def _bwd_layer_norm(g, y, vals, aux):
    x, gain, _ = vals
    xhat, inv_std = nk.normalize_rows(x)
    gxhat = g * gain
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * inv_std
    return [gx, (g * xhat).sum(axis=0), g.sum(axis=0)]


def _fwd_softmax(vals, aux):
    return nk.softmax_rows(vals[0]), None


def _bwd_softmax(g, y, vals, aux):
    dot = (g * y).sum(axis=1, keepdims=True)
    return [y * (g - dot)]


def _fwd_attention(vals, aux):
    n = aux["n_seg"]
    q, ks, vs = vals[0], vals[1 : 1 + n], vals[1 + n :]
    out, weights = attention_core(q, ks, vs, aux["heads"])
    return out, weights


def _bwd_attention(g, y, vals, aux):
    n = aux["n_seg"]
    heads = aux["heads"]
    q, ks, vs = vals[0], vals[1 : 1 + n], vals[1 + n :]
    weights = aux["_saved"]
    if weights is None:  # backward on a tape rebuilt without saved state
        _, weights = attention_core(q, ks, vs, heads)
    k_full = np.vstack(ks) if n > 1 else ks[0]
    v_full = np.vstack(vs) if n > 1 else vs[0]
    dk = q.shape[1] // heads
    inv_sqrt_dk = 1.0 / np.sqrt(dk)
    gq = np.empty_like(q)
    gk = np.empty_like(k_full)
    gv = np.empty_like(v_full)
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        w = weights[h]
        go = g[:, sl]
        gw = go @ v_full[:, sl].T
        gv[:, sl] = w.T @ go
        gl = w * (gw - (gw * w).sum(axis=1, keepdims=True))
        gq[:, sl] = (gl @ k_full[:, sl]) * inv_sqrt_dk
        gk[:, sl] = (gl.T @ q[:, sl]) * inv_sqrt_dk
    sizes = [k.shape[0] for k in ks]
    edges = np.cumsum([0] + sizes)
    gks = [gk[edges[i] : edges[i + 1]] for i in range(n)]
    gvs = [gv[edges[i] : edges[i + 1]] for i in range(n)]
    return [gq, *gks, *gvs]


def _fwd_concat(vals, aux):
    return np.vstack(vals), None


def _bwd_concat(g, y, vals, aux):
    sizes = [v.shape[0] for v in vals]
    edges = np.cumsum([0] + sizes)
    return [g[edges[i] : edges[i + 1]] for i in range(len(vals))]


def _fwd_slice(vals, aux):
    return vals[0][aux["start"] : aux["stop"]], None


def _bwd_slice(g, y, vals, aux):
    gx = np.zeros_like(vals[0])
    gx[aux["start"] : aux["stop"]] = g
    return [gx]


def _fwd_scale_const(vals, aux):
    return vals[0] * aux["c"], None


def _bwd_scale_const(g, y, vals, aux):
    return [g * aux["c"]]


def _fwd_mse(vals, aux):
    pred, target = vals
    if pred.shape != target.shape:
        raise nk.ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    return np.asarray(np.mean((pred - target) ** 2), dtype=pred.dtype), None


def _bwd_mse(g, y, vals, aux):
    pred, target = vals
    gp = g * 2.0 * (pred - target) / pred.size
    return [gp, -gp]


_FORWARD = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "add_bias": _fwd_add_bias,
    "scale_shift": _fwd_scale_shift,
    "silu": _fwd_silu,
    "layer_norm": _fwd_layer_norm,
    "softmax_rows": _fwd_softmax,
    "attention": _fwd_attention,
    "concat_rows": _fwd_concat,
    "slice_rows": _fwd_slice,
    "scale": _fwd_scale_const,
    "mse": _fwd_mse,
}

_BACKWARD = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "add_bias": _bwd_add_bias,
    "scale_shift": _bwd_scale_shift,
    "silu": _bwd_silu,
    "layer_norm": _bwd_layer_norm,
    "softmax_rows": _bwd_softmax,
    "attention": _bwd_attention,
    "concat_rows": _bwd_concat,
    "slice_rows": _bwd_slice,
    "scale": _bwd_scale_const,
    "mse": _bwd_mse,
}


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    """Per-parameter max relative error of AD gradients vs central differences.

    relative error = |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)
    """

    step: float
    per_param: dict[str, float]
    coords_checked: dict[str, int]

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def summary(self) -> str:
        lines = [f"finite-difference check (step {self.step:g})"]
        for name in sorted(self.per_param):
            lines.append(
                f"  {name:32s} max rel err {self.per_param[name]:.3e}"
                f" over {self.coords_checked[name]} coords"
            )
        return "\n".join(lines)


def finite_diff_check(
    f,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    step: float = 1e-5,
    rng: nk.Rng | None = None,
    min_coords: int = 64,
) -> GradReport:
    """Compare AD gradients against central differences of the pure scalar
    function `f(params)`.

    Per tensor, checks a seeded random subsample of at least `min_coords`
    coordinates (all of them if the tensor is smaller).
    """
    rng = rng or nk.Rng(0)
    per_param: dict[str, float] = {}
    coords_checked: dict[str, int] = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        n = flat.size
        if n <= min_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=min_coords, replace=False)
        g_ad = grads[name].reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            patched = dict(params)
            t = p.copy()
            t.reshape(-1)[c] = orig + step
            patched[name] = t
            f_plus = float(f(patched))
            t = p.copy()
            t.reshape(-1)[c] = orig - step
            patched[name] = t
            f_minus = float(f(patched))
            g_fd = (f_plus - f_minus) / (2.0 * step)
            denom = max(1e-8, abs(g_ad[c]) + abs(g_fd))
            worst = max(worst, abs(g_ad[c] - g_fd) / denom)
        per_param[name] = worst
        coords_checked[name] = len(coords)
    return GradReport(step=step, per_param=per_param, coords_checked=coords_checked)
