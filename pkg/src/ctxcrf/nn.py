"""Small dense-tensor core with tape-based reverse-mode differentiation.

Everything the potential networks need lives here: convolution, max pooling,
align-corners bilinear resizing, affine layers, ReLU, softmax cross-entropy,
plus a handful of shape plumbing ops.  Arrays are numpy float64 unless the
caller hands in something else.

Usage::

    with Tape() as tape:
        y = relu(conv2d(x, w, b, stride=1, pad=1))
        loss = softmax_xent(linear(flatten_nodes(y), wl, bl), targets)
    tape.backward(loss)
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "ctxcrf_active_tape", default=None
)


class Tensor:
    """An n-d array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kind: str


class Tape:
    """Ordered record of primitive ops executed while the tape is active."""

    def __init__(self):
        self.ops: list[_Op] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, out: Tensor, inputs: Iterable[Tensor], backward, kind: str) -> None:
        self.ops.append(_Op(out, tuple(inputs), backward, kind))

    def backward(self, root: Tensor, seed: float = 1.0) -> None:
        """Propagate ``seed * d(root)`` back to every leaf with ``requires_grad``.

        Leaf gradients accumulate into ``tensor.grad``; intermediate gradients
        are scratch and never touch the tensors, so a second call adds the same
        contribution again.
        """
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        produced = {id(op.out) for op in self.ops}
        pending: dict[int, np.ndarray] = {id(root): np.full(root.shape, seed, dtype=root.data.dtype)}
        if id(root) not in produced:
            _accumulate_leaf(root, pending.pop(id(root)))
            return
        for op in reversed(self.ops):
            g = pending.pop(id(op.out), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for inp, ig in zip(op.inputs, in_grads):
                if ig is None:
                    continue
                key = id(inp)
                if key in produced:
                    if key in pending:
                        pending[key] = pending[key] + ig
                    else:
                        pending[key] = ig
                elif inp.requires_grad:
                    _accumulate_leaf(inp, ig)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(tape: Tape, root: Tensor, seed: float = 1.0) -> None:
    tape.backward(root, seed)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward, kind: str) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(_tracked(t) for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward, kind)
    return out


def _tracked(t: Tensor) -> bool:
    return t.requires_grad


# ---------------------------------------------------------------------------
# Parameters and optimisation
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors, each carrying a same-shape gradient buffer."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self.velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._entries[n]) for n in self.names()]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad[...] = 0.0

    def num_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._entries) ^ set(state)
        if missing:
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for name, arr in state.items():
            t = self._entries[name]
            if t.data.shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = np.array(arr, dtype=np.float64)
            t.grad = np.zeros_like(t.data)


def sgd_step(
    params: ParamStore, lr: float, weight_decay: float = 0.0, momentum: float = 0.9
) -> ParamStore:
    """v <- momentum*v + (grad + decay*w);  w <- w - lr*v."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    for name, t in params.items():
        step = t.grad + weight_decay * t.data
        v = params.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        v = momentum * v + step
        params.velocity[name] = v
        t.data = t.data - lr * v
    return params


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale all gradients in ``params`` so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(t.grad**2)) for _, t in params.items())))
    if norm > max_norm:
        for _, t in params.items():
            t.grad *= max_norm / norm
    return norm


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv2d(x, weight, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding; input [C,H,W] or [N,C,H,W]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd, squeeze = _batched(x.data)
    w = weight.data
    if w.ndim != 4:
        raise ValueError(f"weight must be [C_out,C_in,kh,kw], got {w.shape}")
    n, c, h, wd = xd.shape
    c_out, c_in, kh, kw = w.shape
    if c != c_in:
        raise ValueError(f"input shape {x.shape} has {c} channels but weight shape {w.shape} expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel sizes must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd

    if kh == 1 and kw == 1:
        cols = xp[:, :, : stride * ho : stride, : stride * wo : stride]
        out = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], cols, optimize=True)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # n,c,ho,wo,kh,kw
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def back(g):
        g4 = g[None] if squeeze else g
        gb = g4.sum(axis=(0, 2, 3))
        if kh == 1 and kw == 1:
            gw = np.einsum("nohw,nchw->oc", g4, cols, optimize=True)[:, :, None, None]
        else:
            gw = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(w[:, :, i, j], g4, axes=([0], [1])).transpose(1, 0, 2, 3)
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx[0] if squeeze else gx), gw, gb

    return _make(out[0] if squeeze else out, (x, weight, bias), back, "conv2d")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def max_pool2d(x, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Max pooling with -inf padding; ties go to the first cell in row-major scan."""
    x = as_tensor(x)
    xd, squeeze = _batched(x.data)
    n, c, h, w = xd.shape
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError("need k >= 1, stride >= 1, pad >= 0")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ValueError(f"window {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if 2 * pad >= k + 1:
        raise ValueError(f"pad {pad} too large for window {k}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else xd
    best = np.full((n, c, ho, wo), -np.inf, dtype=xd.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int32)
    for i in range(k):
        for j in range(k):
            v = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            better = v > best
            best = np.where(better, v, best)
            arg[better] = i * k + j

    def back(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros(xp.shape, dtype=g4.dtype)
        for i in range(k):
            for j in range(k):
                sel = arg == i * k + j
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(sel, g4, 0.0)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return (gx[0] if squeeze else gx,)

    return _make(best[0] if squeeze else best, (x,), back, "max_pool2d")


def interp_matrix(n_in: int, n_out: int, align_corners: bool = True) -> np.ndarray:
    """Row t holds the linear interpolation weights for output coordinate t.

    ``align_corners=False`` treats samples as cell centres: output t sits at
    input coordinate (t + 0.5) * n_in / n_out - 0.5, clamped to the outermost
    centres.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    m = np.zeros((n_out, n_in))
    if not align_corners:
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    elif n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(int)
    i0 = np.clip(i0, 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x, out_h: int, out_w: int, align_corners: bool = True) -> Tensor:
    """Bilinear resize of the two trailing axes (align-corners by default)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"need at least 2 dims, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    ry = interp_matrix(h, out_h, align_corners)
    rx = interp_matrix(w, out_w, align_corners)
    out = ry @ x.data @ rx.T
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,), "bilinear_resize")


def linear(x, weight, bias) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input width {x.shape[1]} does not match weight shape {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weight shape {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def back(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make(out, (x, weight, bias), back, "linear")


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_xent(logits, targets, reduction: str = "mean") -> Tensor:
    """Cross-entropy of row-wise softmax against integer targets."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [n,K], got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ValueError(f"{t.shape[0]} targets for {n} rows")
    if n and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"targets must lie in [0,{k})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    lsm = log_softmax(logits.data)
    rows = np.arange(n)
    total = -lsm[rows, t].sum()
    scale = 1.0 / n if (reduction == "mean" and n) else 1.0
    out = np.array(total * scale)

    def back(g):
        d = np.exp(lsm)
        d[rows, t] -= 1.0
        return (d * (g * scale),)

    return _make(out, (logits,), back, "softmax_xent")


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def total(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum scalar tensors left to right (fixed order keeps results reproducible)."""
    if not terms:
        return Tensor(np.array(0.0))
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return ts[0]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, ts, back, "concat")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


def affine(a, shift: float, factor: float) -> Tensor:
    """Elementwise ``(a + shift) * factor``."""
    a = as_tensor(a)
    return _make((a.data + shift) * factor, (a,), lambda g: (g * factor,), "affine")


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; backward scatter-adds into the source rows."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back, "take_rows")


def flatten_nodes(fmap) -> Tensor:
    """[d,h,w] -> [h*w, d] or [N,d,h,w] -> [N*h*w, d], row-major over (n, row, col)."""
    fmap = as_tensor(fmap)
    if fmap.ndim == 3:
        d = fmap.shape[0]
        return reshape(transpose(fmap, (1, 2, 0)), (-1, d))
    if fmap.ndim == 4:
        d = fmap.shape[1]
        return reshape(transpose(fmap, (0, 2, 3, 1)), (-1, d))
    raise ValueError(f"expected 3-d or 4-d feature map, got {fmap.shape}")


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numerical_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def gradcheck(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` rebuilds the scalar loss from the current tensor values.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    def value() -> float:
        return float(loss_fn().data)

    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, relative_error(a, numerical_grad(value, t, eps)))
    return worst
