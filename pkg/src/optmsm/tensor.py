"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside a ``with Tape() as tape:`` block are recorded when
at least one input requires a gradient.  ``tape.backward(loss)`` then walks the
record in exact reverse creation order and accumulates gradients.  Outside a
tape every op is a plain numpy computation, which is what evaluation uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12

_local = threading.local()


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class Tape:
    """Ordered record of executed primitives.

    Each entry is ``(output, inputs, backward_fn)`` where ``backward_fn`` maps
    the output gradient to a tuple of input gradients (``None`` for inputs that
    do not need one).
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. ``t``; zeros if unreachable."""
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum; each operand's gradient is another einsum.

    Repeated indices inside one operand (diagonals) are not supported.
    """
    lhs, out_spec = subscripts.replace(" ", "").split("->")
    specs = lhs.split(",")
    if len(specs) != len(operands):
        raise DimensionError(f"einsum: {len(specs)} specs for {len(operands)} operands")
    for spec, t in zip(specs, operands):
        if len(set(spec)) != len(spec):
            raise DimensionError(f"einsum: repeated index in {spec!r}")
        if len(spec) != t.ndim:
            raise DimensionError(f"einsum: spec {spec!r} does not fit shape {t.shape}")
    try:
        out = np.einsum(subscripts, *(t.data for t in operands), optimize=len(operands) > 2)
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts}: {exc}") from None

    def backward(g):
        grads = []
        for i, (spec, t) in enumerate(zip(specs, operands)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(s, o.data) for j, (s, o) in enumerate(zip(specs, operands)) if j != i]
            seen = set(out_spec).union(*(set(s) for s, _ in others))
            keep = "".join(c for c in spec if c in seen)
            expr = ",".join([out_spec] + [s for s, _ in others]) + "->" + keep
            gi = np.einsum(expr, g, *(d for _, d in others), optimize=len(others) > 1)
            if keep != spec:
                # indices summed only within this operand: broadcast back
                shape = [t.shape[spec.index(c)] if c in keep else 1 for c in spec]
                order = [keep.index(c) for c in spec if c in keep]
                gi = np.transpose(gi, order).reshape(shape)
                gi = np.broadcast_to(gi, t.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _result(np.asarray(out, dtype=np.float64), tuple(operands), backward)


def _route_len(r) -> int:
    if isinstance(r, slice):
        return max(0, r.stop - r.start)
    return len(r)


def routed_affine(x: Tensor, w: Tensor, b: Tensor, routes: Sequence[np.ndarray],
                  gate: Tensor | None = None, gate_cols: tuple[int, int] | None = None) -> Tensor:
    """Row-wise affine map with one weight set per route.

    ``x`` is (B, in), ``w`` is (G, in, out), ``b`` is (G, out).  Rows selected
    by ``routes[g]`` (an index array, or a slice for scenario-sorted batches)
    use ``w[g]`` and ``b[g]``.  Every row must appear in exactly one route.

    With ``gate`` the input is scaled element-wise first, ``(x * gate) @ w + b``;
    ``gate_cols`` picks a column window of a wider gate tensor.
    """
    if x.ndim != 2 or w.ndim != 3 or b.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"routed_affine: shapes x{x.shape} w{w.shape} b{b.shape}")
    if len(routes) != w.shape[0] or b.shape != (w.shape[0], w.shape[2]):
        raise DimensionError(f"routed_affine: {len(routes)} routes for w{w.shape} b{b.shape}")
    xs = x.data
    if gate is not None:
        lo, hi = gate_cols if gate_cols is not None else (0, gate.shape[-1])
        gd = gate.data[:, lo:hi]
        if gate.ndim != 2 or gd.shape != x.shape:
            raise DimensionError(f"routed_affine: gate {gate.shape}[{lo}:{hi}] vs x{x.shape}")
        xs = xs * gd
    live = [(gidx, rows) for gidx, rows in enumerate(routes) if _route_len(rows) > 0]
    out = np.empty((x.shape[0], w.shape[2]))
    for gidx, rows in live:
        out[rows] = xs[rows] @ w.data[gidx] + b.data[gidx]
    inputs = (x, w, b) if gate is None else (x, w, b, gate)

    def backward(g):
        need_x = x.requires_grad or (gate is not None and gate.requires_grad)
        gxs = np.empty_like(xs) if need_x else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        gb = np.zeros_like(b.data) if b.requires_grad else None
        for gidx, rows in live:
            gr = g[rows]
            if gxs is not None:
                gxs[rows] = gr @ w.data[gidx].T
            if gw is not None:
                gw[gidx] = xs[rows].T @ gr
            if gb is not None:
                gb[gidx] = gr.sum(axis=0)
        if gate is None:
            return gxs, gw, gb
        gx = gxs * gd if x.requires_grad else None
        gg = None
        if gate.requires_grad:
            if (lo, hi) == (0, gate.shape[1]):
                gg = gxs * x.data
            else:
                gg = np.zeros(gate.shape)
                np.multiply(gxs, x.data, out=gg[:, lo:hi])
        return gx, gw, gb, gg

    return _result(out, inputs, backward)


def routed_gate_mlp(x: Tensor, w0: Tensor, b0: Tensor, w1: Tensor, b1: Tensor,
                    routes: Sequence[np.ndarray], mask: np.ndarray | None = None,
                    out_scale: float = 2.0) -> Tensor:
    """Fused per-route two-layer gate network as a single primitive.

    For rows of route g: ``out_scale * sigmoid(relu(x @ w0[g] + b0[g]) @ (w1[g] * mask) + b1[g])``.
    ``w0`` (G, in, hid), ``b0`` (G, hid), ``w1`` (G, hid, out), ``b1`` (G, out); the
    optional constant 0/1 ``mask`` (hid, out) zeroes connections and their gradients.
    """
    G = len(routes)
    if (x.ndim != 2 or w0.shape[:2] != (G, x.shape[1]) or b0.shape != (G, w0.shape[2])
            or w1.shape[:2] != (G, w0.shape[2]) or b1.shape != (G, w1.shape[2])):
        raise DimensionError(f"routed_gate_mlp: x{x.shape} w0{w0.shape} b0{b0.shape} "
                             f"w1{w1.shape} b1{b1.shape} for {G} routes")
    if mask is not None and mask.shape != w1.shape[1:]:
        raise DimensionError(f"routed_gate_mlp: mask {mask.shape} vs w1{w1.shape}")
    w1m = w1.data if mask is None else w1.data * mask
    live = [(gidx, rows) for gidx, rows in enumerate(routes) if _route_len(rows) > 0]
    B = x.shape[0]
    hid = np.empty((B, w0.shape[2]))
    s = np.empty((B, w1.shape[2]))
    for gidx, rows in live:
        hid[rows] = x.data[rows] @ w0.data[gidx] + b0.data[gidx]
    np.maximum(hid, 0.0, out=hid)
    neg_w1, neg_b1 = -w1m, -b1.data  # yields -z directly, saving a pass over the output
    for gidx, rows in live:
        s[rows] = hid[rows] @ neg_w1[gidx] + neg_b1[gidx]
    c = float(out_scale)
    # c * sigmoid(z) = c / (1 + exp(-z)); exp(-z) may overflow to inf, giving the exact limit 0
    with np.errstate(over="ignore"):
        np.exp(s, out=s)
    s += 1.0
    np.divide(c, s, out=s)

    def backward(g):
        # d(c sigmoid)/dz = s (c - s) / c; the 1/c is applied to the small per-route results
        dz = np.subtract(c, s)
        dz *= s
        dz *= g
        inv = 1.0 / c
        dh = np.empty_like(hid)
        gw0, gb0 = np.zeros_like(w0.data), np.zeros_like(b0.data)
        gw1, gb1 = np.zeros_like(w1.data), np.zeros_like(b1.data)
        gx = np.empty_like(x.data) if x.requires_grad else None
        for gidx, rows in live:
            dzr = dz[rows]
            ones = np.ones(dzr.shape[0])
            gw1[gidx] = (hid[rows].T @ dzr) * inv
            gb1[gidx] = (ones @ dzr) * inv
            dh[rows] = dzr @ (w1m[gidx].T * inv)
        dh *= hid > 0
        for gidx, rows in live:
            dhr = dh[rows]
            gw0[gidx] = x.data[rows].T @ dhr
            gb0[gidx] = np.ones(dhr.shape[0]) @ dhr
            if gx is not None:
                gx[rows] = dhr @ w0.data[gidx].T
        if mask is not None:
            gw1 *= mask
        return gx, gw0, gb0, gw1, gb1

    return _result(s, (x, w0, b0, w1, b1), backward)


def routed_mlp(x: Tensor, weights: Sequence[Tensor], biases: Sequence[Tensor],
               routes: Sequence[np.ndarray], gate: Tensor | None = None,
               input_scales: Sequence[np.ndarray] | None = None) -> Tensor:
    """Fused per-route MLP, ReLU between layers, linear output.

    Layer l computes ``(h_l * gate_l * s_l) @ W_l[g] + b_l[g]`` for the rows of
    route g, where ``gate_l`` is layer l's column block of ``gate`` (B, sum of
    layer input widths) and ``s_l`` an optional constant scale (e.g. a dropout
    mask).  Equivalent to chaining ``routed_affine`` and ``relu``; one tape node.
    """
    n = len(weights)
    if n == 0 or len(biases) != n:
        raise DimensionError(f"routed_mlp: {n} weights and {len(biases)} biases")
    widths = [w.shape[1] for w in weights]
    G = len(routes)
    prev = x.shape[1] if x.ndim == 2 else -1
    for l, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 3 or w.shape[:2] != (G, prev) or b.shape != (G, w.shape[2]):
            raise DimensionError(f"routed_mlp layer {l}: input width {prev}, "
                                 f"w{w.shape} b{b.shape} for {G} routes")
        prev = w.shape[2]
    edges = np.concatenate([[0], np.cumsum(widths)]).tolist()
    if gate is not None and gate.shape != (x.shape[0], edges[-1]):
        raise DimensionError(f"routed_mlp: gate {gate.shape} vs layer inputs {widths}")
    if input_scales is not None and len(input_scales) != n:
        raise DimensionError(f"routed_mlp: {len(input_scales)} input scales for {n} layers")
    live = [(gidx, rows) for gidx, rows in enumerate(routes) if _route_len(rows) > 0]

    factors, ins, acts = [], [], []  # per layer: input factor, pre-factor input, scaled input
    h = x.data
    for l in range(n):
        f = None
        if gate is not None:
            f = gate.data[:, edges[l]:edges[l + 1]]
        if input_scales is not None:
            f = input_scales[l] if f is None else f * input_scales[l]
        a = h if f is None else h * f
        z = np.empty((h.shape[0], weights[l].shape[2]))
        wd, bd = weights[l].data, biases[l].data
        for gidx, rows in live:
            z[rows] = a[rows] @ wd[gidx] + bd[gidx]
        if l < n - 1:
            np.maximum(z, 0.0, out=z)
        factors.append(f)
        ins.append(h)
        acts.append(a)
        h = z
    outs = [*ins[1:], h]

    def backward(g):
        gws = [np.zeros_like(w.data) for w in weights]
        gbs = [np.zeros_like(b.data) for b in biases]
        gg = np.empty(gate.shape) if gate is not None and gate.requires_grad else None
        dz = g
        for l in range(n - 1, -1, -1):
            if l < n - 1:
                dz = dz * (outs[l] > 0)
            wd = weights[l].data
            da = np.empty_like(acts[l]) if (l > 0 or x.requires_grad or gg is not None) else None
            for gidx, rows in live:
                dzr = dz[rows]
                gws[l][gidx] = acts[l][rows].T @ dzr
                gbs[l][gidx] = dzr.sum(axis=0)
                if da is not None:
                    da[rows] = dzr @ wd[gidx].T
            if da is None:
                break
            if gg is not None:
                blk = gg[:, edges[l]:edges[l + 1]]
                np.multiply(da, ins[l], out=blk)
                if input_scales is not None:
                    blk *= input_scales[l]
            dz = da if factors[l] is None else da * factors[l]
        gx = dz if x.requires_grad else None
        return (gx, *gws, *gbs) + ((gg,) if gate is not None else ())

    inputs = (x, *weights, *biases) + ((gate,) if gate is not None else ())
    return _result(h, inputs, backward)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor, scale: float = 1.0) -> Tensor:
    """``scale * sigmoid(a)``; the factor is fused so gates in (0, 2) cost one op."""
    s = _sigmoid(a.data)
    if scale == 1.0:
        return _result(s, (a,), lambda g: (g * s * (1.0 - s),))
    c = float(scale)
    return _result(c * s, (a,), lambda g: (g * (c * s * (1.0 - s)),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), backward)


def elementwise(op_kind: str, *operands: Tensor, factor: float | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``relu``, ``sigmoid``, ``scale``."""
    if op_kind == "add":
        return add(*operands)
    if op_kind == "mul":
        return mul(*operands)
    if op_kind == "relu":
        return relu(*operands)
    if op_kind == "sigmoid":
        return sigmoid(*operands)
    if op_kind == "scale":
        if factor is None:
            raise ValueError("scale needs a factor")
        return scale(operands[0], factor)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------- shape ops


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DegenerateInputError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat on axis {axis}: incompatible shapes {[u.shape for u in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, cuts, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    if not 0 <= start <= stop <= a.shape[-1]:
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for shape {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),))


def gather(table: Tensor, *index: np.ndarray) -> Tensor:
    """``table[index...]`` with integer index arrays; gradient scatter-adds."""
    idx = tuple(np.asarray(i, dtype=np.intp) for i in index)
    for ax, i in enumerate(idx):
        if i.size and (i.min() < 0 or i.max() >= table.shape[ax]):
            raise IndexError(
                f"gather: index out of bounds for axis {ax} with size {table.shape[ax]}")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(out, (table,), backward)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    return gather(table, index)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis)
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (a,), backward)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"mean_axis: axis {axis} invalid for shape {a.shape}")
    n = a.shape[axis]
    if n == 0:
        raise DegenerateInputError(f"mean over empty axis {axis} of shape {a.shape}")
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _result(a.data.mean(axis=axis), (a,), backward)


def mean(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise DegenerateInputError("mean of an empty tensor")
    n = a.data.size
    shape = a.shape
    return _result(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(shape, float(g) / n),))


# ---------------------------------------------------------------- geometry


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Unit vectors along ``axis``; rows with norm below 1e-12 map to zero."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    ok = n >= NORM_EPS
    safe = np.where(ok, n, 1.0)
    u = np.where(ok, a.data / safe, 0.0)

    def backward(g):
        return (np.where(ok, (g - u * (u * g).sum(axis=axis, keepdims=True)) / safe, 0.0),)

    return _result(u, (a,), backward)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis (scalar for 1-D inputs).

    If either norm is below 1e-12 the result is 0 with zero gradient.
    """
    if a.shape != b.shape:
        raise DimensionError(f"cosine: shapes differ {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    sa = np.where(ok, na, 1.0)
    sb = np.where(ok, nb, 1.0)
    dot = (a.data * b.data).sum(axis=-1)
    c = np.where(ok, dot / (sa * sb), 0.0)
    c = np.clip(c, -1.0, 1.0)

    def backward(g):
        w = np.where(ok, g, 0.0)[..., None]
        cc, sa_, sb_ = c[..., None], sa[..., None], sb[..., None]
        ga = w * (b.data / (sa_ * sb_) - cc * a.data / sa_**2) if a.requires_grad else None
        gb = w * (a.data / (sa_ * sb_) - cc * b.data / sb_**2) if b.requires_grad else None
        return ga, gb

    return _result(np.asarray(c, dtype=np.float64), (a, b), backward)


def gram(reps: Tensor) -> Tensor:
    """Per-sample Gram matrices: (M, B, d) -> (B, M, M)."""
    if reps.ndim != 3:
        raise DimensionError(f"gram expects (M, B, d), got {reps.shape}")
    r = reps.data
    out = np.einsum("ibd,jbd->bij", r, r)

    def backward(g):
        return (np.einsum("bij,jbd->ibd", g + np.swapaxes(g, 1, 2), r),)

    return _result(out, (reps,), backward)


def pairwise_cosine_sum(reps: Tensor, squared: bool = False) -> Tensor:
    """Sum over samples b and scenario pairs i < j of cos(r_i, r_j) (or its square).

    ``reps`` is (M, B, d).  One fused primitive; the raw sum uses
    sum_{i<j} u_i.u_j = (|sum_i u_i|^2 - sum_i |u_i|^2) / 2 on unit vectors u.
    Rows with norm below 1e-12 count as zero vectors.
    """
    if reps.ndim != 3:
        raise DimensionError(f"pairwise_cosine_sum expects (M, B, d), got {reps.shape}")
    r = reps.data
    n = np.sqrt(np.einsum("mbd,mbd->mb", r, r))[..., None]
    ok = n >= NORM_EPS
    all_ok = bool(ok.all())
    safe = n if all_ok else np.where(ok, n, 1.0)
    u = r / safe if all_ok else np.where(ok, r / safe, 0.0)
    if squared:
        G = np.einsum("ibd,jbd->bij", u, u)
        upper = np.triu(np.ones(G.shape[1:]), k=1)
        val = (G * G * upper).sum()
    else:
        tot = u.sum(axis=0)
        val = 0.5 * (np.vdot(tot, tot) - np.vdot(u, u))

    def backward(g):
        if squared:
            dG = (2.0 * float(g)) * G * upper
            du = np.einsum("bij,jbd->ibd", dG + np.swapaxes(dG, 1, 2), u)
        else:
            du = float(g) * (tot[None] - u)
        gr = (du - u * np.einsum("mbd,mbd->mb", u, du)[..., None]) / safe
        return (gr if all_ok else np.where(ok, gr, 0.0),)

    return _result(np.asarray(val, dtype=np.float64), (reps,), backward)


# ---------------------------------------------------------------- losses


def binary_cross_entropy(p: Tensor, y: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean of -[y ln p + (1-y) ln(1-p)] with p clamped to [eps, 1-eps]."""
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"binary_cross_entropy: shapes {p.shape} vs {y.shape}")
    if p.data.size == 0:
        raise DegenerateInputError("binary_cross_entropy on an empty batch")
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    n = p.data.size
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean()

    def backward(g):
        d = (pc - y) / (pc * (1.0 - pc)) / n
        return (float(g) * np.where(inside, d, 0.0),)

    return _result(np.asarray(loss), (p,), backward)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor]) -> dict[str, np.ndarray]:
    """Run the reverse pass and return named gradients (zeros where unreachable)."""
    tape.backward(loss)
    return {t.name: tape.grad(t) for t in params}

