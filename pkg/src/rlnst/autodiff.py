"""Reverse-mode automatic differentiation over dense numpy arrays.

A global tape records every operation that produces a gradient-requiring
tensor, in creation order (which is automatically topological). ``backward``
replays the tape in reverse from the loss, accumulating gradients additively,
so a tensor used several times receives the sum of all its contributions.

Training runs in float32; gradient-oracle tests run in float64 where central
finite differences are trustworthy.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input values lie outside the mathematical domain of the operation."""


class KernelError(ValueError):
    """Unsupported convolution kernel geometry."""


class ContractError(RuntimeError):
    """An operation contract was violated (e.g. backward on a non-scalar)."""


_GRAD_ENABLED = True
_TAPE: list["Tensor"] = []
# Active backward pass: id(tensor) -> [tensor, local grad]. Keeping per-pass
# buffers (merged into .grad at the end) makes repeated backward calls
# accumulate exactly one contribution each.
_PASS: Optional[dict] = None


class no_grad:
    """Context manager: ops inside do not record backward rules."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class tape:
    """Scoped recording region; entries created inside are dropped on exit."""

    def __enter__(self):
        self._mark = len(_TAPE)
        return self

    def __exit__(self, *exc):
        for t in _TAPE[self._mark:]:
            t._backward = None
            t._parents = ()
        del _TAPE[self._mark:]
        return False


def tape_size() -> int:
    return len(_TAPE)


class Tensor:
    """n-dimensional array plus an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()
        self._tape_pos: Optional[int] = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ----------------------------------------------------
    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        if _PASS is not None:
            entry = _PASS.get(id(self))
            if entry is None:
                _PASS[id(self)] = [self, g.copy()]
            else:
                entry[1] += g
        elif self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return _binary(self, other, np.add, lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        return _binary(self, other, np.multiply, lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other_t = _as_tensor(other, self.dtype)
        if np.any(other_t.data == 0):
            raise DomainError("division by zero")
        return _binary(
            self, other_t, np.divide,
            lambda g, a, b: (g / b, -g * a / (b * b)),
        )

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a, out: -g)

    def __pow__(self, p):
        p = float(p)
        return _unary(self, lambda a: a ** p, lambda g, a, out: g * p * a ** (p - 1.0))

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], requires_grad=_track(self))
        if out.requires_grad:
            src = self

            def bwd(g):
                full = np.zeros_like(src.data)
                full[idx] = g
                src._accumulate(full)

            _record(out, (src,), bwd)
        return out

    # -- elementwise nonlinearities -----------------------------------------
    def exp(self):
        return _unary(self, np.exp, lambda g, a, out: g * out)

    def log(self):
        if np.any(self.data <= 0):
            raise DomainError("log of non-positive value")
        return _unary(self, np.log, lambda g, a, out: g / a)

    def relu(self):
        # subgradient 0 at 0
        return _unary(self, lambda a: np.maximum(a, 0), lambda g, a, out: g * (a > 0))

    def sigmoid(self):
        def fwd(a):
            return 1.0 / (1.0 + np.exp(-a))

        return _unary(self, fwd, lambda g, a, out: g * out * (1.0 - out))

    def tanh(self):
        return _unary(self, np.tanh, lambda g, a, out: g * (1.0 - out * out))

    def square(self):
        return _unary(self, np.square, lambda g, a, out: g * 2.0 * a)

    def abs(self):
        return _unary(self, np.abs, lambda g, a, out: g * np.sign(a))

    def clamp(self, lo: float, hi: float):
        return _unary(
            self,
            lambda a: np.clip(a, lo, hi),
            lambda g, a, out: g * ((a >= lo) & (a <= hi)),
        )

    # -- reductions / reshapes ----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        ax = _norm_axis(axis, self.ndim)
        out = Tensor(self.data.sum(axis=ax, keepdims=keepdims), requires_grad=_track(self))
        if out.requires_grad:
            src, shp = self, self.data.shape

            def bwd(g):
                src._accumulate(np.broadcast_to(_restore_dims(g, shp, ax, keepdims), shp))

            _record(out, (src,), bwd)
        return out

    def mean(self, axis=None, keepdims: bool = False):
        ax = _norm_axis(axis, self.ndim)
        count = self.size if ax is None else int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=ax, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), requires_grad=_track(self))
        if out.requires_grad:
            src = self
            _record(out, (src,), lambda g: src._accumulate(g.reshape(src.data.shape)))
        return out

    def t(self):
        if self.ndim != 2:
            raise ShapeError(f"t() needs a 2-D tensor, got shape {self.shape}")
        out = Tensor(self.data.T, requires_grad=_track(self))
        if out.requires_grad:
            src = self
            _record(out, (src,), lambda g: src._accumulate(g.T))
        return out


# -- construction helpers ----------------------------------------------------

def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _track(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _record(out: Tensor, parents: tuple, backward: Callable[[np.ndarray], None]):
    out._parents = parents
    out._backward = backward
    out._tape_pos = len(_TAPE)
    _TAPE.append(out)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _restore_dims(g, shape, ax, keepdims):
    if ax is None or keepdims:
        return np.asarray(g).reshape([1] * len(shape)) if ax is None and not keepdims else g
    full = list(np.asarray(g).shape)
    for a in sorted(ax):
        full.insert(a, 1)
    return np.asarray(g).reshape(full)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b, fwd, bwd) -> Tensor:
    a_t = a if isinstance(a, Tensor) else None
    if a_t is None:
        a = _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None
    out = Tensor(fwd(a.data, b.data), requires_grad=_track(a, b))
    if out.requires_grad:
        pa, pb = a, b

        def backward(g):
            ga, gb = bwd(g, pa.data, pb.data)
            pa._accumulate(_unbroadcast(np.asarray(ga), pa.shape))
            pb._accumulate(_unbroadcast(np.asarray(gb), pb.shape))

        _record(out, (pa, pb), backward)
    return out


def _unary(x: Tensor, fwd, bwd) -> Tensor:
    out = Tensor(fwd(x.data), requires_grad=_track(x))
    if out.requires_grad:
        src, out_data = x, out.data
        _record(out, (src,), lambda g: src._accumulate(bwd(g, src.data, out_data)))
    return out


# -- linear algebra / spatial kernels -----------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        pa, pb = a, b

        def backward(g):
            pa._accumulate(g @ pb.data.T)
            pb._accumulate(pa.data.T @ g)

        _record(out, (pa, pb), backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat of empty sequence")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base):
            raise ShapeError(f"concat rank mismatch: {base} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_track(*tensors))
    if out.requires_grad:
        parents = tuple(tensors)
        sizes = [t.shape[axis] for t in tensors]

        def backward(g):
            ofs = 0
            for t, s in zip(parents, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(ofs, ofs + s)
                t._accumulate(g[tuple(sl)])
                ofs += s

        _record(out, parents, backward)
    return out


def conv2d_reflect(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
                   stride: int = 1) -> Tensor:
    """KxK convolution with reflection padding (edge pixel not duplicated).

    Output spatial size is ceil(H/stride) x ceil(W/stride).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_reflect needs NCHW input and OIKK weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if kh != kw:
        raise KernelError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise KernelError(f"kernel extent must be odd, got {kh}")
    if i != c:
        raise ShapeError(f"input channels {c} do not match weight channels {i}")
    if stride < 1:
        raise ValueError("stride must be positive")
    k = kh
    pad = (k - 1) // 2
    if h <= pad or wd <= pad:
        raise ShapeError(f"spatial extent {h}x{wd} too small for kernel {k}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    ho, wo = -(-h // stride), -(-wd // stride)
    cols = _im2col(xp, k, stride, ho, wo)              # (N, C*K*K, Ho*Wo)
    wmat = w.data.reshape(o, c * k * k)
    out_data = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
        out_data += bias.data[None, :, None, None]
    out = Tensor(out_data,
                 requires_grad=_track(x, w) or (bias is not None and _track(bias)))
    if out.requires_grad:
        px, pw, pb = x, w, bias
        hp, wp = xp.shape[2], xp.shape[3]

        def backward(g):
            if pb is not None and pb.requires_grad:
                pb._accumulate(g.sum(axis=(0, 2, 3)))
            if pw.requires_grad:
                g3 = g.reshape(n, o, ho * wo)
                gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
                pw._accumulate(gw.reshape(o, c, k, k))
            if px.requires_grad:
                gxp = _conv2d_input_grad(g, pw.data, stride, hp, wp)
                px._accumulate(_fold_reflect(gxp, pad, h, wd))

        parents = (x, w) if bias is None else (x, w, bias)
        _record(out, parents, backward)
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix (N, C*K*K, Ho*Wo) built with K*K strided slice copies,
    avoiding the cache-hostile transpose of a windowed view."""
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, a:a + stride * ho:stride,
                                  b:b + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray, stride: int,
                       hp: int, wp: int) -> np.ndarray:
    """Gradient w.r.t. the padded input: dilate g by the stride, zero-pad,
    and correlate with the flipped kernel as one im2col GEMM."""
    n, o, ho, wo = g.shape
    _, c, k, _ = w.shape
    z = np.zeros((n, o, hp + k - 1, wp + k - 1), dtype=g.dtype)
    z[:, :, k - 1:k - 1 + (ho - 1) * stride + 1:stride,
      k - 1:k - 1 + (wo - 1) * stride + 1:stride] = g
    zcols = _im2col(z, k, 1, hp, wp)
    wflip = np.ascontiguousarray(
        w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, o * k * k)
    return np.matmul(wflip, zcols).reshape(n, c, hp, wp)


def _fold_reflect(gxp: np.ndarray, pad: int, h: int, w: int) -> np.ndarray:
    """Adjoint of reflection padding: add padded-border grads onto their
    mirror sources (top pad row i mirrors source row pad-i, and so on)."""
    if pad == 0:
        return gxp
    rows = gxp[:, :, pad:pad + h, :].copy()
    rows[:, :, 1:pad + 1, :] += gxp[:, :, pad - 1::-1, :]
    rows[:, :, h - pad - 1:h - 1, :] += gxp[:, :, :h + pad - 1:-1, :]
    out = rows[:, :, :, pad:pad + w].copy()
    out[:, :, :, 1:pad + 1] += rows[:, :, :, pad - 1::-1]
    out[:, :, :, w - pad - 1:w - 1] += rows[:, :, :, :w + pad - 1:-1]
    return out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest needs NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.repeat(factor, axis=2).repeat(factor, axis=3),
                 requires_grad=_track(x))
    if out.requires_grad:
        src, f = x, factor
        _record(out, (src,), lambda g: src._accumulate(
            g.reshape(n, c, h, f, w, f).sum(axis=(3, 5))))
    return out


def _pool_matrix(in_extent: int, out_extent: int, dtype) -> np.ndarray:
    if out_extent < 1:
        raise ValueError("pooling output extent must be positive")
    m = np.zeros((out_extent, in_extent), dtype=dtype)
    for i in range(out_extent):
        start = (i * in_extent) // out_extent
        end = -(-(i + 1) * in_extent // out_extent)  # ceil
        end = max(end, start + 1)
        m[i, start:end] = 1.0 / (end - start)
    return m


def avg_pool_to(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling with equal-coverage windows."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool_to needs NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    a = _pool_matrix(h, out_h, x.dtype)
    b = _pool_matrix(w, out_w, x.dtype)
    out_data = np.einsum("ih,jw,nchw->ncij", a, b, x.data, optimize=True)
    out = Tensor(out_data, requires_grad=_track(x))
    if out.requires_grad:
        src = x
        _record(out, (src,), lambda g: src._accumulate(
            np.einsum("ih,jw,ncij->nchw", a, b, g, optimize=True)))
    return out


# -- backward driver -----------------------------------------------------------

def backward(loss: Tensor):
    """Populate .grad on every gradient-requiring ancestor of a scalar loss."""
    global _PASS
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape_pos is None or loss._tape_pos >= len(_TAPE) or _TAPE[loss._tape_pos] is not loss:
        raise ContractError("loss is not on the active tape (created under no_grad or after a tape scope exit)")
    if _PASS is not None:
        raise ContractError("backward is not reentrant")
    _PASS = {id(loss): [loss, np.ones_like(loss.data)]}
    try:
        for t in reversed(_TAPE[: loss._tape_pos + 1]):
            entry = _PASS.get(id(t))
            if entry is not None and t._backward is not None:
                t._backward(entry[1])
        for t, g in _PASS.values():
            if t.grad is None:
                t.grad = g
            else:
                t.grad += g
    finally:
        _PASS = None


# -- numerical oracle -----------------------------------------------------------

def finite_diff_gradient(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                         h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, element by element.

    Evaluations run under no_grad so the probe never touches the tape. The
    function must be deterministic (freeze any rng draws before calling).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = x.data.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(Tensor(base.copy(), requires_grad=False)))
            flat[i] = orig - h
            fm = _scalar(f(Tensor(base.copy(), requires_grad=False)))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference normalized by the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / (scale + 1e-12))
