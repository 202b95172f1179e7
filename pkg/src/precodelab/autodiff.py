"""Minimal reverse-mode automatic differentiation over float64 ndarrays.

The operator set is exactly what the feature-prediction network and the
differentiable precoder recovery need: broadcasting arithmetic, a few
elementwise nonlinearities, reductions, shape ops, batched matmul, batched
matrix inverse and log-determinant, and a 2-D convolution. Complex linear
algebra is expressed on (real, imaginary) tensor pairs, with Hermitian
matrices embedded as real [[A, -B], [B, A]] blocks for inversion and
log-determinants.

Gradients are accumulated by a topological backward sweep from a scalar
loss. Everything runs in float64; gradient checks against central finite
differences are part of the test suite.
"""

from __future__ import annotations

import numpy as np

from .core import NumericalError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node of the computation graph; wraps one float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor(self.data + other.data, parents=(self, other), backward=bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accumulate(-g)

        return Tensor(-self.data, parents=(self,), backward=bw)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor(self.data * other.data, parents=(self, other), backward=bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return Tensor(self.data / other.data, parents=(self, other), backward=bw)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, exponent: float):
        e = float(exponent)

        def bw(g):
            self._accumulate(g * e * self.data ** (e - 1.0))

        return Tensor(self.data ** e, parents=(self,), backward=bw)

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = self.data @ other.data

        def bw(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.shape))

        return Tensor(out, parents=(self, other), backward=bw)

    # -- elementwise --------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)

        def bw(g):
            self._accumulate(g * out)

        return Tensor(out, parents=(self,), backward=bw)

    def log(self):
        def bw(g):
            self._accumulate(g / self.data)

        return Tensor(np.log(self.data), parents=(self,), backward=bw)

    def sqrt(self):
        out = np.sqrt(self.data)

        def bw(g):
            self._accumulate(g * 0.5 / out)

        return Tensor(out, parents=(self,), backward=bw)

    def clamp_min(self, floor: float):
        mask = self.data > floor

        def bw(g):
            self._accumulate(g * mask)

        return Tensor(np.maximum(self.data, floor), parents=(self,), backward=bw)

    def leaky_relu(self, slope: float = 0.01):
        factor = np.where(self.data > 0.0, 1.0, slope)

        def bw(g):
            self._accumulate(g * factor)

        return Tensor(self.data * factor, parents=(self,), backward=bw)

    def sigmoid(self):
        x = self.data
        out = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def bw(g):
            self._accumulate(g * out * (1.0 - out))

        return Tensor(out, parents=(self,), backward=bw)

    # -- reductions & shape -------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, self.shape).copy())

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                      parents=(self,), backward=bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def bw(g):
            self._accumulate(g.reshape(self.shape))

        return Tensor(self.data.reshape(shape), parents=(self,), backward=bw)

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)

        def bw(g):
            self._accumulate(g.transpose(inv))

        return Tensor(self.data.transpose(axes), parents=(self,), backward=bw)

    def swap_last2(self):
        nd = self.data.ndim
        axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
        return self.transpose(*axes)

    def __getitem__(self, idx):
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor(self.data[idx], parents=(self,), backward=bw)

    # -- linear algebra -----------------------------------------------------

    def inverse(self):
        try:
            out = np.linalg.inv(self.data)
        except np.linalg.LinAlgError as e:
            raise NumericalError("matrix inverse failed in the graph") from e

        def bw(g):
            ot = np.swapaxes(out, -1, -2)
            self._accumulate(-ot @ g @ ot)

        return Tensor(out, parents=(self,), backward=bw)

    def logdet(self):
        """Log-determinant of batched positive-definite matrices."""
        sign, ld = np.linalg.slogdet(self.data)
        if np.any(sign <= 0.0) or not np.all(np.isfinite(ld)):
            raise NumericalError("log-determinant of a non-positive-definite matrix")

        def bw(g):
            inv = np.swapaxes(np.linalg.inv(self.data), -1, -2)
            self._accumulate(g[..., None, None] * inv)

        return Tensor(ld, parents=(self,), backward=bw)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor(np.concatenate(datas, axis=axis), parents=tuple(tensors), backward=bw)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero padding of the two trailing spatial axes."""
    widths = [(0, 0)] * (x.data.ndim - 2) + [(pad, pad), (pad, pad)]

    def bw(g):
        sl = tuple([slice(None)] * (x.data.ndim - 2) + [slice(pad, -pad)] * 2)
        x._accumulate(g[sl])

    return Tensor(np.pad(x.data, widths), parents=(x,), backward=bw)


_TAP_MATRICES: dict[tuple, np.ndarray] = {}


def _conv_tap_matrix(h: int, w: int, j: int) -> np.ndarray:
    """0/1 map from kernel taps to (output, input) position pairs.

    T[t, p*S + s] = 1 when input position s contributes to output position p
    through kernel tap t under stride-1 same padding (S = h*w positions).
    """
    key = (h, w, j)
    t = _TAP_MATRICES.get(key)
    if t is None:
        pad = (j - 1) // 2
        pi, pj = np.divmod(np.arange(h * w), w)
        du = pi[:, None] - pi[None, :] + pad
        dv = pj[:, None] - pj[None, :] + pad
        valid = (du >= 0) & (du < j) & (dv >= 0) & (dv < j)
        tap = (du * j + dv).ravel()
        t = np.zeros((j * j, (h * w) ** 2))
        cols = np.flatnonzero(valid.ravel())
        t[tap[cols], cols] = 1.0
        _TAP_MATRICES[key] = t
    return t


def _use_gather_conv(n_in: int, n_out: int, h: int, w: int) -> bool:
    # the gathered kernel has C*F*S^2 entries per position pair; cap its size
    return n_in * n_out * (h * w) ** 2 <= 2_000_000


def _gathered_kernel(wd: np.ndarray, h: int, w: int) -> np.ndarray:
    """Kernel as a (C*S, F*S) position matrix (S = h*w)."""
    f, c, j, _ = wd.shape
    s = h * w
    t = _conv_tap_matrix(h, w, j)
    k = (wd.reshape(f * c, j * j) @ t).reshape(f, c, s, s)
    return k.transpose(1, 3, 0, 2).reshape(c * s, f * s)


def _conv_forward(x: np.ndarray, wd: np.ndarray, bd: np.ndarray) -> np.ndarray:
    """Stride-1 same-padding convolution, plain arrays."""
    n, c, h, w = x.shape
    f, _, j, _ = wd.shape
    if _use_gather_conv(c, f, h, w):
        k2 = _gathered_kernel(wd, h, w)
        y = (x.reshape(n, c * h * w) @ k2).reshape(n, f, h, w)
        return y + bd[None, :, None, None]
    pad = (j - 1) // 2
    xp = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    patches = np.lib.stride_tricks.sliding_window_view(xp, (j, j), axis=(2, 3))
    y = np.einsum("nchwuv,fcuv->nfhw", patches, wd, optimize=True)
    return y + bd[None, :, None, None]


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1, size-preserving 2-D convolution.

    x: (N, C, H, W), w: (F, C, J, J) with J odd, b: (F,). Small feature maps
    run as one position-space matmul against a gathered kernel; larger maps
    fall back to the sliding-window formulation.
    """
    n, c, h, wd_ = x.data.shape
    f, _, j, _ = w.data.shape
    out = _conv_forward(x.data, w.data, b.data)

    if _use_gather_conv(c, f, h, wd_):
        s = h * wd_
        k2 = _gathered_kernel(w.data, h, wd_)
        t = _conv_tap_matrix(h, wd_, j)

        def bw(g):
            g2 = g.reshape(n, f * s)
            if b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accumulate((g2 @ k2.T).reshape(n, c, h, wd_))
            if w.requires_grad:
                dk2 = x.data.reshape(n, c * s).T @ g2
                dk = dk2.reshape(c, s, f, s).transpose(2, 0, 3, 1)
                w._accumulate((dk.reshape(f * c, s * s) @ t.T).reshape(f, c, j, j))

    else:
        pad = (j - 1) // 2

        def bw(g):
            if b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                xp = np.pad(x.data, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
                patches = np.lib.stride_tricks.sliding_window_view(
                    xp, (j, j), axis=(2, 3))
                w._accumulate(
                    np.einsum("nchwuv,nfhw->fcuv", patches, g, optimize=True))
            if x.requires_grad:
                gp = np.pad(g, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
                wf = w.data[:, :, ::-1, ::-1]
                gpatches = np.lib.stride_tricks.sliding_window_view(
                    gp, (j, j), axis=(2, 3))
                x._accumulate(
                    np.einsum("nfhwuv,fcuv->nchw", gpatches, wf, optimize=True))

    return Tensor(out, parents=(x, w, b), backward=bw)


# ---------------------------------------------------------------------------
# Complex pairs: a complex tensor is a (real, imag) pair of real Tensors.
# ---------------------------------------------------------------------------


def cpair(z: np.ndarray) -> tuple[Tensor, Tensor]:
    """Constant complex array as a (re, im) Tensor pair."""
    z = np.asarray(z, dtype=np.complex128)
    return Tensor(z.real.copy()), Tensor(z.imag.copy())


def cvalue(a: tuple[Tensor, Tensor]) -> np.ndarray:
    return a[0].data + 1j * a[1].data


def cmatmul(a, b):
    ar, ai = a
    br, bi = b
    return (ar @ br - ai @ bi, ar @ bi + ai @ br)


def cconjt(a):
    ar, ai = a
    return (ar.swap_last2(), -ai.swap_last2())


def cscale(a, s: Tensor):
    """Multiply a complex pair by a real (broadcastable) tensor."""
    return (a[0] * s, a[1] * s)


def cadd(a, b):
    return (a[0] + b[0], a[1] + b[1])


def herm_embed(a) -> Tensor:
    """Real 2n x 2n embedding [[A, -B], [B, A]] of A + jB (batched)."""
    ar, ai = a
    top = concat([ar, -ai], axis=-1)
    bottom = concat([ai, ar], axis=-1)
    return concat([top, bottom], axis=-2)


def cherm_inverse(a):
    """Inverse of a Hermitian complex matrix via its real embedding."""
    n = a[0].data.shape[-1]
    inv = herm_embed(a).inverse()
    re = inv[..., :n, :n]
    im = inv[..., n:, :n]
    return (re, im)


def cherm_logdet(a) -> Tensor:
    """log det of a Hermitian positive-definite matrix (real output).

    The real embedding has determinant |det C|^2 = det(C)^2.
    """
    return herm_embed(a).logdet() * 0.5
