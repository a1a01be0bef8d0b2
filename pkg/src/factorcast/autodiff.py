"""Dense float64 tensors with a reverse-mode gradient tape.

Covers exactly the operations the network and the contrastive estimators
need. Tensors carry an optional leading batch axis; every op broadcasts
over it. Graphs are implicit: each op closes over its parents and a
backward callback, and ``backward`` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray, own: bool = False) -> None:
        """Add g into the gradient buffer.

        ``own=True`` promises g is a freshly allocated array no other node
        holds, letting the first accumulation adopt it without a copy.
        """
        if self.grad is None:
            self.grad = g if own and isinstance(g, np.ndarray) else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; every arithmetic path goes through the module-level ops.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return take(self, key)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        if a.requires_grad or a._parents:
            ga = _unbroadcast(g, a.shape)
            a.accumulate(ga, own=ga is not g)
        if b.requires_grad or b._parents:
            gb = _unbroadcast(g, b.shape)
            b.accumulate(gb, own=gb is not g)

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        if a.requires_grad or a._parents:
            ga = _unbroadcast(g, a.shape)
            a.accumulate(ga, own=ga is not g)
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(-g, b.shape), own=True)

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(g * a.data, b.shape), own=True)

    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        a.accumulate(c * g, own=True)

    return _make(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from exc

    def backward(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape), own=True)
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape), own=True)

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""

    def backward(g):
        a.accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a.accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def take(a: Tensor, key) -> Tensor:
    """Basic slicing; backward scatters into the sliced region."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        a.accumulate(full, own=True)

    return _make(a.data[key], (a,), backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            if t.requires_grad or t._parents:
                t.accumulate(g[tuple(idx)])

    return _make(data, tensors, backward)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            if t.requires_grad or t._parents:
                t.accumulate(part)

    return _make(data, tensors, backward)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # exp overflow saturates cleanly to 0/1
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_values(a.data)

    def backward(g):
        a.accumulate(g * data * (1.0 - data), own=True)

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a.accumulate(g * (1.0 - data * data), own=True)

    return _make(data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(np.broadcast_to(g, a.shape).copy(), own=True)

    return _make(np.asarray(a.data.sum()), (a,), backward)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape).copy(), own=True)

    return _make(data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        a.accumulate(np.broadcast_to(g / n, a.shape).copy(), own=True)

    return _make(np.asarray(a.data.mean()), (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        a.accumulate((g - inner) * data, own=True)

    return _make(data, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def backward(g):
        a.accumulate(np.expand_dims(g, axis) * soft, own=True)

    return _make(data, (a,), backward)


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: split ``axis`` in half into (value, gate), return value * sigmoid(gate)."""
    n = a.shape[axis]
    if n % 2 != 0:
        raise ShapeError(f"glu: axis {axis} extent {n} is odd, cannot split in half")
    half = n // 2
    idx_v = [slice(None)] * a.ndim
    idx_g = [slice(None)] * a.ndim
    idx_v[axis] = slice(0, half)
    idx_g[axis] = slice(half, n)
    idx_v, idx_g = tuple(idx_v), tuple(idx_g)
    value = a.data[idx_v]
    gate = _sigmoid_values(a.data[idx_g])
    data = value * gate

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx_v] = g * gate
        full[idx_g] = g * value * gate * (1.0 - gate)
        a.accumulate(full, own=True)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# convolution

def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Multi-channel 1-D convolution along axis -2, zero-padded "same".

    Channels-last layout: x is (..., L, C_in), w is (C_out, C_in, K) with K
    odd, b is (C_out,); the result is (..., L, C_out). Each kernel tap is
    one shifted matmul, so BLAS does all the channel mixing.
    """
    c_out, c_in, k = w.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel size {k} must be odd")
    if x.ndim < 2 or x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-1:]} != kernel channels {c_in}")
    pad = (k - 1) // 2
    length = x.shape[-2]
    xp = np.zeros(x.shape[:-2] + (length + 2 * pad, c_in))
    xp[..., pad:pad + length, :] = x.data
    taps = [np.ascontiguousarray(w.data[:, :, kk].T) for kk in range(k)]  # (C_in, C_out)
    data = np.matmul(xp[..., 0:length, :], taps[0])
    for kk in range(1, k):
        data += np.matmul(xp[..., kk:kk + length, :], taps[kk])
    if b is not None:
        data += b.data

    def backward(g):
        if w.requires_grad or w._parents:
            gw = np.empty((c_out, c_in, k))
            g2 = g.reshape(-1, c_out)
            for kk in range(k):
                seg = xp[..., kk:kk + length, :].reshape(-1, c_in)
                gw[:, :, kk] = np.matmul(g2.T, seg)
            w.accumulate(gw, own=True)
        if b is not None and (b.requires_grad or b._parents):
            b.accumulate(g.reshape(-1, c_out).sum(axis=0), own=True)
        if x.requires_grad or x._parents:
            gxp = np.zeros_like(xp)
            for kk in range(k):
                gxp[..., kk:kk + length, :] += np.matmul(g, taps[kk].T)
            x.accumulate(gxp[..., pad:pad + length, :], own=True)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward)


# ---------------------------------------------------------------------------
# real discrete Fourier transform as constant matrix products

_DFT_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}


def _dft_matrices(n: int):
    if n not in _DFT_CACHE:
        f = n // 2 + 1
        kk, tt = np.meshgrid(np.arange(f), np.arange(n), indexing="ij")
        ang = 2.0 * np.pi * kk * tt / n
        cos_m = np.cos(ang)          # (F, T)
        sin_m = -np.sin(ang)         # rfft sign convention
        weights = np.full(f, 2.0)
        weights[0] = 1.0
        if n % 2 == 0:
            weights[-1] = 1.0
        inv_re = weights[:, None] * cos_m / n
        inv_im = -weights[:, None] * (-sin_m) / n  # == weights * sin_m / n
        _DFT_CACHE[n] = (cos_m.T.copy(), sin_m.T.copy(), inv_re, inv_im)
    return _DFT_CACHE[n]


def real_dft(x: Tensor) -> tuple[Tensor, Tensor]:
    """rfft along the last axis: (..., T) -> real and imaginary parts, each (..., T//2+1)."""
    cos_t, sin_t, _, _ = _dft_matrices(x.shape[-1])
    return matmul(x, constant(cos_t)), matmul(x, constant(sin_t))


def real_idft(re: Tensor, im: Tensor, n: int) -> Tensor:
    """Inverse of real_dft; reconstructs the real signal of length ``n`` exactly."""
    if re.shape != im.shape:
        raise ShapeError(f"real_idft: real part {re.shape} != imaginary part {im.shape}")
    if re.shape[-1] != n // 2 + 1:
        raise ShapeError(f"real_idft: {re.shape[-1]} bins do not match length {n}")
    _, _, inv_re, inv_im = _dft_matrices(n)
    return add(matmul(re, constant(inv_re)), matmul(im, constant(inv_im)))


# ---------------------------------------------------------------------------
# losses

def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} != target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gd = (2.0 / n) * diff * g
        if pred.requires_grad or pred._parents:
            pred.accumulate(gd, own=not (target.requires_grad or target._parents))
        if target.requires_grad or target._parents:
            target.accumulate(-gd, own=True)

    return _make(np.asarray((diff * diff).mean()), (pred, target), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; logits (M, C), integer labels (M,)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    m = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    soft = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(m)
    nll = -(shifted[rows, labels] - np.log(e.sum(axis=1)))

    def backward(g):
        gd = soft.copy()
        gd[rows, labels] -= 1.0
        logits.accumulate(g * gd / m, own=True)

    return _make(np.asarray(nll.mean()), (logits,), backward)


# ---------------------------------------------------------------------------
# symmetric eigendecomposition

_EIG_GAP_TOL = 1e-9


def sym_eig(a: Tensor) -> tuple[Tensor, Tensor]:
    """Eigendecomposition of a (stack of) symmetric matrices.

    Returns (eigenvalues, eigenvectors). The backward pass uses the standard
    symmetric vjp; near-degenerate eigen-gaps (< 1e-9) contribute zero rather
    than blowing up. Losses must be invariant to eigenvector sign, which holds
    for every spectral-filter use in this package.
    """
    if not np.isfinite(a.data).all():
        raise ValueError("sym_eig: non-finite input matrix")
    lam, u = np.linalg.eigh(a.data)
    lam_t = Tensor(lam)
    u_t = Tensor(u)
    needs = a.requires_grad or a._parents
    if needs:
        diff = lam[..., None, :] - lam[..., :, None]  # diff[i, j] = lam_j - lam_i
        with np.errstate(divide="ignore"):
            f = np.where(np.abs(diff) > _EIG_GAP_TOL, 1.0 / np.where(diff == 0, 1.0, diff), 0.0)

        def backward_u(g):
            inner = f * np.matmul(np.swapaxes(u, -1, -2), g)
            ga = np.matmul(np.matmul(u, inner), np.swapaxes(u, -1, -2))
            a.accumulate(0.5 * (ga + np.swapaxes(ga, -1, -2)), own=True)

        def backward_lam(g):
            ga = np.matmul(u * g[..., None, :], np.swapaxes(u, -1, -2))
            a.accumulate(0.5 * (ga + np.swapaxes(ga, -1, -2)), own=True)

        u_t.requires_grad = True
        u_t._parents = (a,)
        u_t._backward = backward_u
        lam_t.requires_grad = True
        lam_t._parents = (a,)
        lam_t._backward = backward_lam
    return lam_t, u_t


# ---------------------------------------------------------------------------
# tape traversal

def backward(loss: Tensor, store: "ParamStore | None" = None) -> dict[str, np.ndarray] | None:
    """Reverse-mode sweep from a scalar loss.

    Accumulates gradients on every reachable tensor; returns a map keyed by
    parameter name when ``store`` is given (exact zeros for leaves off the
    loss path). A graph can be swept only once.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: tape already consumed for this loss")
    loss._consumed = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack_.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if store is not None:
        return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in store.items()}
    return None


# ---------------------------------------------------------------------------
# parameter store (the tape's leaf registry)

class ParamStore:
    """Named float64 leaf tensors, partitioned by identifier prefix.

    Feature-extractor parameters live under ``theta/`` and task-head
    parameters under ``w/<task>/``.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def theta_names(self) -> list[str]:
        return [n for n in self._params if n.startswith("theta/")]

    def w_names(self, task: str | None = None) -> list[str]:
        prefix = "w/" if task is None else f"w/{task}/"
        return [n for n in self._params if n.startswith(prefix)]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r} in state")
            p = self._params[name]
            if p.data.shape != value.shape:
                raise ShapeError(f"parameter {name!r}: stored {value.shape} != current {p.data.shape}")
            p.data = np.array(value, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_scalars(self) -> int:
        return sum(p.data.size for p in self._params.values())


# ---------------------------------------------------------------------------
# flat binary snapshots

_MAGIC = b"FCST"
_VERSION = 1
_TAG_PARAM = 0
_TAG_IMPORTANCE = 1


def save_snapshot(path, params: dict[str, np.ndarray],
                  importance: dict[str, dict[str, np.ndarray]] | None = None) -> None:
    """Write parameters (and per-task importance maps) as tagged flat records."""
    records: list[tuple[int, str, np.ndarray]] = []
    for name, arr in params.items():
        records.append((_TAG_PARAM, name, np.asarray(arr, dtype=np.float64)))
    for task, omega in (importance or {}).items():
        for name, arr in omega.items():
            records.append((_TAG_IMPORTANCE, f"{task}|{name}", np.asarray(arr, dtype=np.float64)))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(records)))
        for tag, name, arr in records:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<BH", tag, len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_snapshot(path) -> tuple[dict[str, np.ndarray], dict[str, dict[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"not a snapshot file: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != _VERSION:
        raise ValueError(f"snapshot version mismatch: file has {version}, reader supports {_VERSION}")
    offset = 10
    params: dict[str, np.ndarray] = {}
    importance: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(count):
        tag, name_len = struct.unpack_from("<BH", blob, offset)
        offset += 3
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype=np.float64, count=size, offset=offset).reshape(shape).copy()
        offset += 8 * size
        if tag == _TAG_PARAM:
            params[name] = arr
        elif tag == _TAG_IMPORTANCE:
            task, pname = name.split("|", 1)
            importance.setdefault(task, {})[pname] = arr
        else:
            raise ValueError(f"unknown record tag {tag}")
    return params, importance
