"""Reverse-mode differentiable kernels, parameter containers and the SGD optimizer.

All learnable computation in the package is composed from the kernels in this
module. Tensors carry 64-bit values, gradients are accumulated on a dynamic
tape, and every kernel output is checked for NaN/Inf.
"""
from __future__ import annotations

import json
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteValue(ArithmeticError):
    """A kernel produced NaN or Inf."""


class ShapeMismatch(ValueError):
    pass


class KernelTooLarge(ValueError):
    pass


class MissingGradient(RuntimeError):
    pass


class NonDeterministicFunction(RuntimeError):
    pass


_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (target-network forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense value buffer with optional gradient buffer.

    Intermediate tensors remember their parents and a vector-Jacobian closure;
    `backward()` on a scalar walks the tape in reverse topological order and
    accumulates (+=) into `.grad`.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(self.value).all():
            raise NonFiniteValue("tensor initialized with non-finite values")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def _tracked(self) -> bool:
        return self.requires_grad or self._vjp is not None

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.value.size != 1:
            raise ShapeMismatch("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._tracked() and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent._tracked():
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += g

    # convenience operators used throughout the package
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteValue("kernel produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = False
    if _grad_enabled and any(p._tracked() for p in parents):
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    val = a.value + b.value
    return _make(val, (a, b), lambda g: (_unbroadcast(g, a.value.shape),
                                         _unbroadcast(g, b.value.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    val = a.value - b.value
    return _make(val, (a, b), lambda g: (_unbroadcast(g, a.value.shape),
                                         _unbroadcast(-g, b.value.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    val = a.value * b.value
    return _make(val, (a, b), lambda g: (_unbroadcast(g * b.value, a.value.shape),
                                         _unbroadcast(g * a.value, b.value.shape)))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make(a.value * s, (a,), lambda g: (g * s,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    val = a.value.reshape(shape)
    src = a.value.shape
    return _make(val, (a,), lambda g: (g.reshape(src),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    val = a.value @ b.value
    return _make(val, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def affine(h, w) -> Tensor:
    """Right-multiplication by a trainable matrix: out = h @ w."""
    return matmul(h, w)


def graph_aggregate(a_hat, h) -> Tensor:
    """Aggregate node features with a (possibly learnable) normalized adjacency."""
    a_hat, h = as_tensor(a_hat), as_tensor(h)
    if a_hat.ndim != 2 or a_hat.shape[0] != a_hat.shape[1] or a_hat.shape[1] != h.shape[0]:
        raise ShapeMismatch(f"graph_aggregate: {a_hat.shape} x {h.shape}")
    return matmul(a_hat, h)


def conv1d(x, kernel) -> Tensor:
    """Valid cross-correlation, stride 1: (M,C_in,L) * (C_out,C_in,k) -> (M,C_out,L-k+1)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeMismatch(f"conv1d: input {x.shape}, kernel {kernel.shape}")
    m, c_in, length = x.shape
    c_out, kc_in, k = kernel.shape
    if kc_in != c_in:
        raise ShapeMismatch(f"conv1d: channel mismatch {c_in} vs {kc_in}")
    if k > length:
        raise KernelTooLarge(f"conv1d: kernel {k} exceeds spectral length {length}")
    windows = np.lib.stride_tricks.sliding_window_view(x.value, k, axis=2)
    # windows: (M, C_in, L-k+1, k)
    val = np.einsum("mctj,ocj->mot", windows, kernel.value, optimize=True)

    def vjp(g: np.ndarray):
        grad_k = np.einsum("mot,mctj->ocj", g, windows, optimize=True)
        gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
        gwin = np.lib.stride_tricks.sliding_window_view(gpad, k, axis=2)
        kflip = kernel.value[:, :, ::-1]
        grad_x = np.einsum("mosj,ocj->mcs", gwin, kflip, optimize=True)
        return grad_x, grad_k

    return _make(val, (x, kernel), vjp)


def batch_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the sample axis, per trailing feature slot, then scale-shift.

    Accepts (M, F) or (M, C, L); the trailing dimensions are treated as one
    flattened feature axis, so gamma/beta have prod(trailing) entries. Batch
    statistics (population variance) are always used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    orig_shape = x.shape
    m = orig_shape[0]
    f = int(np.prod(orig_shape[1:]))
    if gamma.value.size != f or beta.value.size != f:
        raise ShapeMismatch(f"batch_norm: {f} features, scale {gamma.value.size}, shift {beta.value.size}")
    xv = x.value.reshape(m, f)
    mean = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv_std
    gflat = gamma.value.reshape(f)
    val = (xhat * gflat + beta.value.reshape(f)).reshape(orig_shape)

    def vjp(g: np.ndarray):
        gy = g.reshape(m, f)
        grad_gamma = (gy * xhat).sum(axis=0).reshape(gamma.value.shape)
        grad_beta = gy.sum(axis=0).reshape(beta.value.shape)
        gx_hat = gy * gflat
        grad_x = inv_std * (gx_hat
                            - gx_hat.mean(axis=0)
                            - xhat * (gx_hat * xhat).mean(axis=0))
        return grad_x.reshape(orig_shape), grad_gamma, grad_beta

    return _make(val, (x, gamma, beta), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    val = sigmoid_value(x.value)
    return _make(val, (x,), lambda g: (g * val * (1.0 - val),))


def sigmoid_value(z: np.ndarray | float) -> np.ndarray:
    """Numerically stable sigmoid on plain arrays."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_L2_EPS = 1e-12


def l2_normalize_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"l2_normalize_rows: expected matrix, got {x.shape}")
    sq = (x.value ** 2).sum(axis=1, keepdims=True)
    norm = np.sqrt(sq + _L2_EPS ** 2)
    val = x.value / norm

    def vjp(g: np.ndarray):
        dot = (g * x.value).sum(axis=1, keepdims=True)
        return ((g - x.value * (dot / (norm ** 2))) / norm,)

    return _make(val, (x,), vjp)


def logsumexp_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"logsumexp_rows: expected matrix, got {x.shape}")
    mx = x.value.max(axis=1, keepdims=True)
    ex = np.exp(x.value - mx)
    s = ex.sum(axis=1, keepdims=True)
    val = (mx + np.log(s)).reshape(-1)
    softmax = ex / s
    return _make(val, (x,), lambda g: (g[:, None] * softmax,))


def diag_part(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"diag_part: expected square matrix, got {x.shape}")
    n = x.shape[0]
    val = np.diagonal(x.value).copy()

    def vjp(g: np.ndarray):
        out = np.zeros((n, n))
        np.fill_diagonal(out, g)
        return (out,)

    return _make(val, (x,), vjp)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    src = x.value.shape
    return _make(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),))


def normalized_adjacency(edge_weights, edges: np.ndarray, n_nodes: int) -> Tensor:
    """Self-looped, symmetrically renormalized adjacency from per-edge weights.

    Builds A from the undirected edge list (weights mirrored across the
    diagonal, zero elsewhere), adds the identity and returns
    D^{-1/2} (A + I) D^{-1/2} as a dense tensor. The backward pass reaches the
    per-edge weights through both the direct entries and the degree terms, so
    edge weights can be learned end-to-end through downstream aggregation.
    """
    w = as_tensor(edge_weights)
    edges = np.asarray(edges, dtype=np.int64)
    if w.ndim != 1 or edges.ndim != 2 or edges.shape[1] != 2 or edges.shape[0] != w.value.size:
        raise ShapeMismatch(f"normalized_adjacency: {w.shape} weights vs {edges.shape} edges")
    u, v = edges[:, 0], edges[:, 1]
    a_tilde = np.eye(n_nodes)
    a_tilde[u, v] += w.value
    a_tilde[v, u] += w.value
    deg = a_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    a_hat = a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]

    def vjp(g: np.ndarray):
        # direct term through the mirrored entries
        direct = (g[u, v] + g[v, u]) * inv_sqrt[u] * inv_sqrt[v]
        # degree term: d(A_hat_ij)/d(deg_u) contributes -A_hat_ij/(2 deg_u) for i=u or j=u
        s = (g * a_hat).sum(axis=1) + (g * a_hat).sum(axis=0)
        degree_term = -0.5 * (s[u] / deg[u] + s[v] / deg[v])
        return (direct + degree_term,)

    return _make(a_hat, (w,), vjp)


class ParamSet:
    """Named trainable tensors with per-parameter momentum buffers.

    Names are unique and insertion-ordered; `lr_mult` lets a parameter group
    (e.g. the predictor) train at a multiple of the base learning rate.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._momentum: dict[str, np.ndarray] = {}
        self._lr_mult: dict[str, float] = {}

    def add(self, name: str, value: np.ndarray, lr_mult: float = 1.0) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._momentum[name] = np.zeros_like(t.value)
        self._lr_mult[name] = float(lr_mult)
        return t

    def merge(self, other: "ParamSet") -> None:
        for name in other.names():
            if name in self._params:
                raise ValueError(f"duplicate parameter name: {name}")
            self._params[name] = other._params[name]
            self._momentum[name] = other._momentum[name]
            self._lr_mult[name] = other._lr_mult[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy_values_from(self, other: "ParamSet") -> None:
        for name, t in self._params.items():
            np.copyto(t.value, other._params[name].value)

    def save(self, path) -> None:
        index = []
        offset = 0
        for name, t in self._params.items():
            index.append({"name": name, "shape": list(t.value.shape), "offset": offset})
            offset += t.value.size
        header = json.dumps({"params": index}).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for t in self._params.values():
                fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())

    def load(self, path) -> None:
        with open(path, "rb") as fh:
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            for entry in header["params"]:
                name = entry["name"]
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(count * 8)
                arr = np.frombuffer(buf, dtype="<f8").reshape(shape)
                if name not in self._params:
                    raise KeyError(f"checkpoint parameter not in model: {name}")
                if self._params[name].value.shape != shape:
                    raise ShapeMismatch(f"checkpoint shape mismatch for {name}")
                np.copyto(self._params[name].value, arr)


def sgd_step(params: ParamSet, lr: float, weight_decay: float = 0.0,
             momentum: float = 0.0) -> None:
    """Classical SGD with coupled weight decay: v <- mom*v + g + wd*theta; theta -= lr*v."""
    for name, t in params.items():
        if t.grad is None:
            raise MissingGradient(f"parameter {name} has no gradient")
        v = params._momentum[name]
        v *= momentum
        v += t.grad + weight_decay * t.value
        t.value -= lr * params._lr_mult[name] * v


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 at t=0 down to 0 at t=total."""
    if not 0 <= t <= total:
        raise ValueError(f"cosine_lr: epoch {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


class GradCheckReport:
    """Per-parameter comparison of analytic gradients against central differences."""

    def __init__(self, tol: float):
        self.tol = tol
        self.per_param: dict[str, float] = {}
        self.failures: list[tuple[str, int, float]] = []

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def __repr__(self):
        status = "ok" if self.ok else f"{len(self.failures)} failures"
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, {status})"


def grad_check(f: Callable[[], Tensor], params: ParamSet, h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Check analytic gradients of a deterministic scalar-valued closure.

    Relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-4);
    the floor keeps finite-difference truncation noise on near-zero entries from
    flagging spurious failures at h=1e-5.
    """
    v0 = float(f().value)
    v1 = float(f().value)
    if v0 != v1:
        raise NonDeterministicFunction(f"two evaluations differ: {v0} vs {v1}")

    params.zero_grad()
    loss = f()
    loss.backward()
    analytic = {name: (np.array(t.grad) if t.grad is not None else np.zeros_like(t.value))
                for name, t in params.items()}

    report = GradCheckReport(tol)
    for name, t in params.items():
        flat = t.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().value)
            flat[i] = orig - h
            fm = float(f().value)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            if rel > worst:
                worst = rel
            if rel > tol:
                report.failures.append((name, i, rel))
        report.per_param[name] = worst
    return report
