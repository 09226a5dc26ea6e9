"""Minimal reverse-mode differentiation over dense float64 arrays.

A `Node` wraps a numpy array plus the backward rule that produced it. Graphs
are built eagerly by the op functions below and differentiated by
`backward(loss)`. Only what the pipeline needs is implemented: elementwise
arithmetic with numpy-style broadcasting (gradients are reduced back over
broadcast axes), 2-D matmul, a handful of nonlinearities, axis reductions,
gather/scatter over rows, and concat/reshape/slice plumbing.

Design notes
  * float64 everywhere; gradient-check tolerances drive the choice.
  * max routes gradient to the first (lowest-index) argmax element.
  * `no_grad()` suppresses graph construction for frozen/inference passes.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .core import NumericError


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


_grad_enabled = True
_mac_counter = None  # optional [int] cell filled by count_macs()


@contextmanager
def no_grad():
    """Disable graph construction within the block (frozen-model forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def count_macs():
    """Count matmul multiply-accumulates executed inside the block."""
    global _mac_counter
    prev = _mac_counter
    cell = [0]
    _mac_counter = cell
    try:
        yield cell
    finally:
        _mac_counter = prev


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "needs_grad")

    def __init__(self, value, parents=(), vjp=None, needs_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        if not _grad_enabled:
            needs_grad = False
        self.needs_grad = needs_grad
        # constants keep no graph: lets dead subtrees be collected early
        self.parents = tuple(parents) if needs_grad else ()
        self.vjp = vjp if needs_grad else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, needs_grad={self.needs_grad})"

    # operator sugar; scalars/arrays are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def constant(value) -> Node:
    return Node(value, needs_grad=False)


def leaf(value, needs_grad: bool = True) -> Node:
    return Node(value, needs_grad=needs_grad)


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float, np.floating, np.integer, np.ndarray, list, tuple)):
        return constant(x)
    raise TypeError(f"cannot lift {type(x).__name__} into the graph")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_value(opname, a, b, fn):
    try:
        return fn(a.value, b.value)
    except ValueError as e:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} incompatible") from e


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    out = _binary_value("add", a, b, np.add)
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    out = _binary_value("sub", a, b, np.subtract)
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    out = _binary_value("mul", a, b, np.multiply)
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape),
                           _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    out = _binary_value("div", a, b, np.divide)
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g / b.value, a.shape),
                           _unbroadcast(-g * a.value / (b.value * b.value), b.shape)))


def neg(a) -> Node:
    a = _lift(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Node:
    """Multiply by a plain python scalar."""
    a = _lift(a)
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    if _mac_counter is not None:
        _mac_counter[0] += a.shape[0] * a.shape[1] * b.shape[1]
    out = a.value @ b.value
    return Node(out, (a, b),
                lambda g: (g @ b.value.T, a.value.T @ g))


def relu(a) -> Node:
    a = _lift(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Node:
    a = _lift(a)
    # numerically stable split over sign
    v = a.value
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.clip(v, 0, None))),
                 np.exp(np.clip(v, None, 0)) / (1.0 + np.exp(np.clip(v, None, 0))))
    return Node(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a) -> Node:
    a = _lift(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = _lift(a)
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Node:
    a = _lift(a)
    out = np.sqrt(a.value)
    return Node(out, (a,), lambda g: (g * (0.5 / out),))


def sin(a) -> Node:
    a = _lift(a)
    return Node(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a) -> Node:
    a = _lift(a)
    return Node(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def pow_int(a, n: int) -> Node:
    a = _lift(a)
    n = int(n)
    out = a.value ** n
    return Node(out, (a,), lambda g: (g * n * a.value ** (n - 1),))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp values; gradient passes only where the input was inside."""
    a = _lift(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return Node(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))


def where(cond, a, b) -> Node:
    """Select with a constant boolean mask."""
    a, b = _lift(a), _lift(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.value, b.value)
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g * cond, a.shape),
                           _unbroadcast(g * ~cond, b.shape)))


def minimum2(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    return where(a.value <= b.value, a, b)


def maximum2(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    return where(a.value >= b.value, a, b)


def max_over_set(a, axis: int, keepdims: bool = False) -> Node:
    """Max along `axis`; gradient routed to the first argmax (ties -> lowest index)."""
    a = _lift(a)
    out = np.max(a.value, axis=axis, keepdims=keepdims)
    idx = np.argmax(a.value, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.value)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis=axis)
        return (ga,)

    return Node(out, (a,), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = _lift(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Node(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _lift(a)
    if axis is None:
        denom = a.size
    else:
        denom = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / denom)


def concat(nodes, axis: int = 0) -> Node:
    nodes = [_lift(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(nodes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return Node(out, tuple(nodes), vjp)


def reshape(a, shape) -> Node:
    a = _lift(a)
    out = a.value.reshape(shape)
    return Node(out, (a,), lambda g: (g.reshape(a.shape),))


def slice_cols(a, start: int, stop: int) -> Node:
    """Columns [start:stop) of a 2-D node."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_cols expects 2-D, got {a.shape}")
    out = a.value[:, start:stop]

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[:, start:stop] = g
        return (ga,)

    return Node(out, (a,), vjp)


def gather_rows(a, idx) -> Node:
    """Rows a[idx]; duplicate indices accumulate gradient."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.value[idx]

    def vjp(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        return (ga,)

    return Node(out, (a,), vjp)


def scatter_rows(a, idx, n_rows: int) -> Node:
    """Sum rows of `a` into an (n_rows, ...) zero array at positions idx."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.value)
    return Node(out, (a,), lambda g: (g[idx],))


def pick(a, i: int) -> Node:
    """Scalar element a[i] of a 1-D node."""
    a = _lift(a)
    out = a.value[i]

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[i] = g
        return (ga,)

    return Node(out, (a,), vjp)


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's `.grad`.

    Repeated calls without `zero_grad` keep accumulating (used for batch
    gradient accumulation). `loss` must be scalar.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.needs_grad:
        return
    # iterative post-order topological sort (graphs can be deep)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.needs_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if not p.needs_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameter storage and optimization


def kaiming(shape, rng: np.random.Generator) -> np.ndarray:
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ParamStore:
    """Named trainable arrays plus Adam moment buffers.

    Parameter nodes persist across forward passes; graphs reference them
    directly, and the optimizer updates `.value` in place.
    """

    def __init__(self):
        self.params: dict[str, Node] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.t = 0

    def param(self, name: str, shape=None, init="kaiming", rng=None) -> Node:
        if name in self.params:
            p = self.params[name]
            if shape is not None and p.shape != tuple(shape):
                raise ShapeError(f"param {name!r}: stored {p.shape} vs requested {tuple(shape)}")
            return p
        if shape is None:
            raise KeyError(f"unknown parameter {name!r}")
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        elif init == "kaiming":
            if rng is None:
                raise ValueError(f"param {name!r} needs an rng for kaiming init")
            value = kaiming(tuple(shape), rng)
        elif callable(init):
            value = np.asarray(init(tuple(shape)), dtype=np.float64)
        else:
            raise ValueError(f"unknown init {init!r}")
        node = leaf(value)
        self.params[name] = node
        self._m[name] = np.zeros(node.shape)
        self._v[name] = np.zeros(node.shape)
        return node

    def set(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name in self.params:
            if self.params[name].shape != value.shape:
                raise ShapeError(f"param {name!r}: shape mismatch on set")
            self.params[name].value = value.copy()
        else:
            self.params[name] = leaf(value.copy())
            self._m[name] = np.zeros(value.shape)
            self._v[name] = np.zeros(value.shape)

    def names(self):
        return list(self.params.keys())

    def count(self) -> int:
        """Exact trainable scalar count."""
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def values(self) -> dict:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_values(self, arrays: dict) -> None:
        for name, arr in arrays.items():
            self.set(name, arr)

    def state_bytes(self) -> bytes:
        return b"".join(self.params[n].value.tobytes() for n in sorted(self.params))

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p.value).all():
                raise NumericError(f"parameter {name!r} became non-finite")


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard Adam update with bias correction; missing grads count as zero."""
    store.t += 1
    t = store.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else 0.0
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.value = p.value - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Warmup + cosine decay stand-in for a one-cycle schedule.

    Linear 0.1*lr -> lr over the first 10% of steps, then cosine decay
    down to 0.01*lr.
    """
    total_steps = max(int(total_steps), 1)
    warm = max(int(round(0.1 * total_steps)), 1)
    if step < warm:
        return base_lr * (0.1 + 0.9 * step / warm)
    tail = max(total_steps - warm, 1)
    frac = min((step - warm) / tail, 1.0)
    lo = 0.01 * base_lr
    return lo + (base_lr - lo) * 0.5 * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# checkpoint format: magic "PCD1", name-indexed little-endian float64 arrays

_MAGIC = b"PCD1"


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Write name-indexed arrays (+ optional utf-8 metadata strings)."""
    entries = dict(arrays)
    for key, text in (meta or {}).items():
        data = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
        entries[f"__meta__:{key}"] = data.astype(np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = np.asarray(entries[name], dtype=np.float64)  # keeps 0-d shape
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    off = 4
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict = {}
    meta: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape.append(d)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        if name.startswith("__meta__:"):
            meta[name[len("__meta__:"):]] = bytes(arr.astype(np.uint8)).decode("utf-8")
        else:
            arrays[name] = arr
    return arrays, meta


# ---------------------------------------------------------------------------
# finite-difference verification

def finite_diff_grad(build_loss, param_node: Node, indices, h: float = 1e-4):
    """Central finite differences of `build_loss()` w.r.t. selected entries."""
    flat = param_node.value.reshape(-1)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        up = float(build_loss().value)
        flat[i] = orig - h
        dn = float(build_loss().value)
        flat[i] = orig
        out.append((up - dn) / (2.0 * h))
    return np.array(out)


def check_gradients(build_loss, store: ParamStore, h: float = 1e-4,
                    max_entries_per_param: int | None = None,
                    rng: np.random.Generator | None = None,
                    tol: float = 1e-4):
    """Compare analytic gradients against central differences.

    Returns (max_rel_err, worst_param_name). Relative error uses
    |a - f| / max(|a|, |f|, 1e-6); absolute disagreements below 1e-8 are
    treated as exact (finite-difference round-off dominates at that scale;
    a wrong backward rule on any gradient that matters disagrees by far
    more than 1e-8).

    Entries still failing at step h are re-evaluated at h/4 and h/16 and the
    best agreement is kept: a stencil that straddles a piecewise boundary
    (relu kink, max switch, clip edge) stops straddling it as h shrinks,
    while a genuinely wrong backward rule disagrees at every step size.
    """
    store.zero_grad()
    loss = build_loss()
    backward(loss)
    worst = 0.0
    worst_name = ""
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        g = np.asarray(g).reshape(-1)
        n = g.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            if rng is None:
                idx = np.linspace(0, n - 1, max_entries_per_param).astype(int)
            else:
                idx = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(n)
        fd = finite_diff_grad(build_loss, p, idx, h=h)

        def rel_err(a, f):
            if abs(a - f) < 1e-8:
                return 0.0
            return abs(a - f) / max(abs(a), abs(f), 1e-6)

        for k, i in enumerate(idx):
            a = g[i]
            rel = rel_err(a, fd[k])
            for refine in (4.0, 16.0):
                if rel < tol:
                    break
                f = finite_diff_grad(build_loss, p, [i], h=h / refine)[0]
                rel = min(rel, rel_err(a, f))
            if rel > worst:
                worst = rel
                worst_name = name
    store.zero_grad()
    return worst, worst_name


def _primitive_cases():
    """One tiny gradcheck graph per primitive, keyed by op name."""
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4)) + 0.1
    b = rng.normal(size=(3, 4)) + 0.1
    m = rng.normal(size=(4, 2))
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    idx = np.array([2, 0, 1, 2])
    idx_scatter = np.array([2, 0, 2])  # one row per input row, with a collision

    def case(op, *inputs):
        return op, [np.array(x, dtype=np.float64) for x in inputs]

    return {
        "add": (lambda x, y: sum_(add(x, y)), [a, b]),
        "sub": (lambda x, y: sum_(mul(sub(x, y), sub(x, y))), [a, b]),
        "mul": (lambda x, y: sum_(mul(x, y)), [a, b]),
        "div": (lambda x, y: sum_(div(x, y)), [a, pos]),
        "scale": (lambda x: sum_(scale(x, 2.5)), [a]),
        "matmul": (lambda x, y: sum_(matmul(x, y)), [a, m]),
        "relu": (lambda x: sum_(relu(x)), [a]),
        "sigmoid": (lambda x: sum_(sigmoid(x)), [a]),
        "exp": (lambda x: sum_(exp(x)), [a]),
        "log": (lambda x: sum_(log(x)), [pos]),
        "sqrt": (lambda x: sum_(sqrt(x)), [pos]),
        "sin": (lambda x: sum_(sin(x)), [a]),
        "cos": (lambda x: sum_(cos(x)), [a]),
        "pow_int": (lambda x: sum_(pow_int(x, 4)), [a]),
        "clip": (lambda x: sum_(clip(x, -0.4, 0.9)), [a]),
        "where": (lambda x, y: sum_(where(a > 0, x, y)), [a, b]),
        "max_over_set": (lambda x: sum_(max_over_set(x, axis=1)), [a]),
        "mean": (lambda x: mean(x), [a]),
        "sum": (lambda x: sum_(mul(x, x)), [a]),
        "concat": (lambda x, y: sum_(mul(concat([x, y], axis=1), 1.5)), [a, b]),
        "reshape": (lambda x: sum_(mul(reshape(x, (4, 3)), 2.0)), [a]),
        "slice_cols": (lambda x: sum_(slice_cols(x, 1, 3)), [a]),
        "gather_rows": (lambda x: sum_(mul(gather_rows(x, idx), 1.25)), [a]),
        "scatter_rows": (lambda x: sum_(mul(scatter_rows(x, idx_scatter, 5), 0.5)), [a]),
        "pick": (lambda x: mul(pick(reshape(x, (-1,)), 3), 2.0), [a]),
        "broadcast_add": (lambda x, v: sum_(mul(add(x, v), 1.5)), [a, a[0] * 0.5]),
    }


def gradcheck_primitives(h: float = 1e-4):
    """Finite-difference check of every primitive; returns {op: max_rel_err}."""
    results = {}
    for name, (fn, inputs) in _primitive_cases().items():
        store = ParamStore()
        nodes = [store.param(f"x{i}", v.shape, init=(lambda s, v=v: v))
                 for i, v in enumerate(inputs)]
        worst, _ = check_gradients(lambda: fn(*nodes), store, h=h)
        results[name] = worst
    return results


# ---------------------------------------------------------------------------
# shared layer helpers

def linear(x: Node, store: ParamStore, name: str, out_dim: int,
           rng=None, w_init="kaiming") -> Node:
    w = store.param(f"{name}.w", (x.shape[1], out_dim), init=w_init, rng=rng)
    b = store.param(f"{name}.b", (out_dim,), init="zeros")
    return add(matmul(x, w), b)


def mlp(x: Node, store: ParamStore, prefix: str, widths, rng=None,
        final_relu: bool = False) -> Node:
    """Shared point-wise MLP over rows of x: Linear+ReLU stack."""
    h = x
    for i, wdt in enumerate(widths):
        h = linear(h, store, f"{prefix}.{i}", wdt, rng=rng)
        if i < len(widths) - 1 or final_relu:
            h = relu(h)
    return h


def layer_norm(x: Node, store: ParamStore, name: str, eps: float = 1e-6) -> Node:
    """Row-wise normalization with learned gain/bias (batch-independent,
    deterministic; keeps feature magnitudes O(1) without batch statistics)."""
    dim = x.shape[1]
    gain = store.param(f"{name}.g", (dim,), init="ones")
    bias = store.param(f"{name}.b", (dim,), init="zeros")
    mu = mean(x, axis=1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gain), bias)
