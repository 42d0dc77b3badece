"""Reverse-mode automatic differentiation over numpy arrays.

A small tape engine: every operation returns a new :class:`Tensor` that
remembers its parents and a vector-Jacobian-product closure.  ``backward``
walks the tape once in reverse topological order.  Only the operations
needed by the encoder / predictor / explainer stack are implemented, all
vectorized; there is no graph reuse, a fresh tape is built per forward
pass.  Arrays are treated as immutable once wrapped.

``stop_gradient`` (``Tensor.detach``) is the primitive the Siamese loss
relies on: the returned tensor shares data but is a constant under
differentiation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "conv3d",
    "maxpool3d",
    "gradient_check",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
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
    """Numpy array plus gradient plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    # -- tape ------------------------------------------------------------------
    def detach(self) -> "Tensor":
        """Stop-gradient: same values, constant under differentiation."""
        return Tensor(self.data, requires_grad=False)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` into every reachable leaf's ``.grad``."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate into .grad
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = g.copy()
                    else:
                        node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic --------------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            out = _node(self.data + other.data, (self, other))
            if out._parents:
                a_shape, b_shape = self.shape, other.shape
                out._vjp = lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))
            return out
        out = _node(self.data + other, (self,))
        if out._parents:
            a_shape = self.shape
            out._vjp = lambda g: (_unbroadcast(g, a_shape),)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        if out._parents:
            out._vjp = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = _node(self.data * other.data, (self, other))
            if out._parents:
                a, b = self, other
                out._vjp = lambda g: (
                    _unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape),
                )
            return out
        other_arr = other
        out = _node(self.data * other_arr, (self,))
        if out._parents:
            a_shape = self.shape
            out._vjp = lambda g: (_unbroadcast(g * other_arr, a_shape),)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out = _node(self.data / other.data, (self, other))
            if out._parents:
                a, b = self, other
                out._vjp = lambda g: (
                    _unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
                )
            return out
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        out = _node(other / self.data, (self,))
        if out._parents:
            a = self
            out._vjp = lambda g: (_unbroadcast(-g * other / (a.data * a.data), a.shape),)
        return out

    def __pow__(self, exponent: float):
        out = _node(self.data ** exponent, (self,))
        if out._parents:
            a = self
            out._vjp = lambda g: (g * exponent * a.data ** (exponent - 1.0),)
        return out

    def __matmul__(self, other: "Tensor"):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        out = _node(self.data @ other.data, (self, other))
        if out._parents:
            a, b = self, other
            out._vjp = lambda g: (
                _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
                _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
            )
        return out

    # -- reductions ----------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            a_shape = self.shape

            def vjp(g):
                gg = g
                if axis is not None and not keepdims:
                    gg = np.expand_dims(gg, axis)
                return (np.broadcast_to(gg, a_shape).copy(),)

            out._vjp = vjp
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False):
        """Maximum along one axis; ties route the gradient to the first maximum."""
        am = self.data.argmax(axis=axis)
        am_exp = np.expand_dims(am, axis)
        vals = np.take_along_axis(self.data, am_exp, axis=axis)
        out_data = vals if keepdims else np.squeeze(vals, axis=axis)
        out = _node(out_data, (self,))
        if out._parents:
            a_shape = self.shape

            def vjp(g):
                gg = g if keepdims else np.expand_dims(g, axis)
                gp = np.zeros(a_shape, dtype=gg.dtype)
                np.put_along_axis(gp, am_exp, gg, axis=axis)
                return (gp,)

            out._vjp = vjp
        return out

    # -- shape ----------------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))
        if out._parents:
            a_shape = self.shape
            out._vjp = lambda g: (g.reshape(a_shape),)
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = _node(self.data.transpose(axes), (self,))
        if out._parents:
            inv = tuple(np.argsort(axes))
            out._vjp = lambda g: (g.transpose(inv),)
        return out

    def __getitem__(self, idx):
        out = _node(self.data[idx], (self,))
        if out._parents:
            a_shape, a_dtype = self.shape, self.data.dtype
            fancy = _has_array_index(idx)

            def vjp(g):
                gp = np.zeros(a_shape, dtype=a_dtype)
                if fancy:
                    np.add.at(gp, idx, g)
                else:
                    gp[idx] += g
                return (gp,)

            out._vjp = vjp
        return out

    # -- elementwise nonlinearities ----------------------------------------------------
    def exp(self):
        val = np.exp(self.data)
        out = _node(val, (self,))
        if out._parents:
            out._vjp = lambda g: (g * val,)
        return out

    def log(self):
        out = _node(np.log(self.data), (self,))
        if out._parents:
            a = self
            out._vjp = lambda g: (g / a.data,)
        return out

    def sqrt(self):
        val = np.sqrt(self.data)
        out = _node(val, (self,))
        if out._parents:
            out._vjp = lambda g: (g * 0.5 / val,)
        return out

    def sigmoid(self):
        val = 1.0 / (1.0 + np.exp(-self.data))
        out = _node(val, (self,))
        if out._parents:
            out._vjp = lambda g: (g * val * (1.0 - val),)
        return out

    def relu(self):
        out = _node(np.maximum(self.data, 0), (self,))
        if out._parents:
            mask = self.data > 0
            out._vjp = lambda g: (g * mask,)
        return out

    def leaky_relu(self, negative_slope: float = 0.2):
        mask = self.data > 0
        slope = np.asarray(negative_slope, dtype=self.data.dtype)
        out = _node(np.where(mask, self.data, self.data * slope), (self,))
        if out._parents:
            out._vjp = lambda g: (g * np.where(mask, 1.0, slope).astype(g.dtype),)
        return out

    def elu(self, alpha: float = 1.0):
        mask = self.data > 0
        expm1 = alpha * np.expm1(self.data)
        val = np.where(mask, self.data, expm1).astype(self.data.dtype)
        out = _node(val, (self,))
        if out._parents:
            out._vjp = lambda g: (g * np.where(mask, 1.0, expm1 + alpha).astype(g.dtype),)
        return out


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _has_array_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        out._vjp = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


# ---------------------------------------------------------------------------
# volumetric ops (kernel 3, stride 1, zero padding 1 / window-2 max pooling)
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3D convolution, kernel 3, stride 1, zero padding 1, channels last.

    ``x``: (B, D, H, W, Cin); ``w``: (Cout, Cin, 3, 3, 3); ``b``: (Cout,).
    im2col in the array's natural axis order (no transpose), so the heavy
    work is one BLAS matmul per direction.
    """
    xd, wd, bd = x.data, w.data, b.data
    B, D, H, W, cin = xd.shape
    cout = wd.shape[0]
    P = D * H * W

    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    # (B, D, H, W, Cin, 3, 3, 3) -> (B, P, Cin*27); flattening order (c, kd, kh, kw)
    # matches w.reshape(Cout, Cin*27)
    cols = win.reshape(B, P, cin * 27)
    wmat = wd.reshape(cout, cin * 27)
    out_data = (cols @ wmat.T + bd).reshape(B, D, H, W, cout)

    out = _node(out_data, (x, w, b))
    if out._parents:

        def vjp(g):
            gm = g.reshape(B, P, cout)
            gw = np.tensordot(gm, cols, axes=([0, 1], [0, 1])).reshape(cout, cin, 3, 3, 3)
            gb = gm.sum(axis=(0, 1))
            gc = (gm @ wmat).reshape(B, D, H, W, cin, 3, 3, 3)
            gxp = np.zeros_like(xp)
            for kd in range(3):
                for kh in range(3):
                    for kw in range(3):
                        gxp[:, kd:kd + D, kh:kh + H, kw:kw + W, :] += gc[:, :, :, :, :, kd, kh, kw]
            gx = gxp[:, 1:-1, 1:-1, 1:-1, :]
            return (gx, gw, gb)

        out._vjp = vjp
    return out


def _pool_pairs(xd: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Window-2 stride-2 max along one axis; returns (maxes, first-slot-won mask)."""
    even = [slice(None)] * xd.ndim
    odd = [slice(None)] * xd.ndim
    even[axis] = slice(0, None, 2)
    odd[axis] = slice(1, None, 2)
    a, b = xd[tuple(even)], xd[tuple(odd)]
    first = a >= b  # ties go to the first cell
    return np.where(first, a, b), first


def maxpool3d(x: Tensor) -> Tensor:
    """Max pooling with window 2 and stride 2 over the three spatial axes of a
    channels-last (B, D, H, W, C) tensor; odd trailing planes are cropped and
    ties route the gradient to the first cell.
    """
    xd = x.data
    B, D, H, W, C = xd.shape
    d2, h2, w2 = D // 2, H // 2, W // 2
    if min(d2, h2, w2) < 1:
        raise ValueError(f"maxpool3d needs spatial dims >= 2, got {(D, H, W)}")
    xc = xd[:, : 2 * d2, : 2 * h2, : 2 * w2, :]
    y1, m1 = _pool_pairs(xc, 1)
    y2, m2 = _pool_pairs(y1, 2)
    y3, m3 = _pool_pairs(y2, 3)

    out = _node(y3, (x,))
    if out._parents:

        def _unpool(g, mask, axis, length):
            shape = list(g.shape)
            shape[axis] = length
            gx = np.zeros(shape, dtype=g.dtype)
            even = [slice(None)] * g.ndim
            odd = [slice(None)] * g.ndim
            even[axis] = slice(0, None, 2)
            odd[axis] = slice(1, None, 2)
            gx[tuple(even)] = g * mask
            gx[tuple(odd)] = g * ~mask
            return gx

        def vjp(g):
            g2 = _unpool(g, m3, 3, 2 * w2)
            g1 = _unpool(g2, m2, 2, 2 * h2)
            g0 = _unpool(g1, m1, 1, 2 * d2)
            gx = np.zeros_like(xd)
            gx[:, : 2 * d2, : 2 * h2, : 2 * w2, :] = g0
            return (gx,)

        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def gradient_check(
    f: Callable[[], Tensor],
    wrt: Iterable[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-3,
) -> float:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    Returns the maximum relative error ``|a - n| / max(floor, |a|, |n|)``
    over the checked coordinates; coordinates where both gradients are below
    ``floor`` are effectively compared on an absolute scale.  With
    ``max_coords`` set, a seeded random subset of coordinates per tensor is
    checked (the full sweep is quadratic and pointless for large kernels).
    Inputs should be float64 for the documented tolerances to be meaningful.
    """
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("gradient_check expects a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    for t in wrt:
        t.grad = None

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t, a in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        n_coords = flat.size
        if max_coords is not None and n_coords > max_coords:
            coords = rng.choice(n_coords, size=max_coords, replace=False)
        else:
            coords = np.arange(n_coords)
        a_flat = a.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(f().data)
            flat[c] = orig - step
            f_minus = float(f().data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(floor, abs(a_flat[c]), abs(numeric))
            worst = max(worst, abs(a_flat[c] - numeric) / denom)
    return worst
