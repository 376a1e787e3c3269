"""Reverse-mode autodiff over numpy arrays.

Exactly the op set the VGG8 regressor needs: 3D convolution (3x3x3,
stride 1, pad 1), 3D batch norm, ReLU, 2x2x2 max pooling, dense layers,
MAE loss, and Adam. Tensors carry the graph micrograd-style: each op
stores its parents and a closure that routes the output gradient back.

Convolution runs as one GEMM per layer over an im2col matrix built from
27 contiguous slice copies; the backward pass reuses that matrix.
Summation order is fixed by the GEMM, so identical inputs give
identical outputs. Ops compute in the dtype of their inputs: float32 in
production, float64 for gradient checking.
"""

from dataclasses import dataclass, field

import numpy as np

# When True, every op output is checked for NaN/Inf (costs ~10% runtime).
CHECK_FINITE = False


class AutogradError(Exception):
    pass


class ShapeMismatchError(AutogradError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_needs")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._needs = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Backpropagate from this tensor, seeding with ones.

        Populates .grad on every tensor in the graph that leads to a
        requires_grad leaf.
        """
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents, backward) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise AutogradError("op produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    needed = tuple(p for p in parents if p._needs)
    if needed:
        out._parents = needed
        out._backward = backward
        out._needs = True
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t._needs:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


_OFFSETS = [(dz, dy, dx) for dz in range(3) for dy in range(3) for dx in range(3)]


def _im2col(xp: np.ndarray, dims) -> np.ndarray:
    """(N, Ci, D+2, H+2, W+2) padded input -> (Ci*27, N*D*H*W) column matrix."""
    n, ci = xp.shape[0], xp.shape[1]
    d, h, w = dims
    cols = np.empty((ci, 27, n, d, h, w), dtype=xp.dtype)
    for j, (dz, dy, dx) in enumerate(_OFFSETS):
        cols[:, j] = xp[:, :, dz : dz + d, dy : dy + h, dx : dx + w].transpose(1, 0, 2, 3, 4)
    return cols.reshape(ci * 27, n * d * h * w)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3x3 cross-correlation, stride 1, zero-pad 1 (shape-preserving)."""
    if x.data.ndim != 5:
        raise ShapeMismatchError(f"conv3d input must be 5-D, got {x.shape}")
    n, ci, d, h, w = x.shape
    if weight.data.ndim != 5 or weight.shape[1:] != (ci, 3, 3, 3):
        raise ShapeMismatchError(f"conv3d weight {weight.shape} incompatible with input {x.shape}")
    co = weight.shape[0]
    if bias.shape != (co,):
        raise ShapeMismatchError(f"conv3d bias must be ({co},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    colm = _im2col(xp, (d, h, w))
    wm = weight.data.transpose(1, 2, 3, 4, 0).reshape(ci * 27, co)
    out = (wm.T @ colm).reshape(co, n, d, h, w).transpose(1, 0, 2, 3, 4)
    out = np.ascontiguousarray(out)
    out += bias.data[None, :, None, None, None]

    def backward(g):
        gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(co, -1)
        _accum(bias, g.sum(axis=(0, 2, 3, 4)))
        if weight._needs:
            gwm = colm @ gf.T
            _accum(weight, gwm.reshape(ci, 3, 3, 3, co).transpose(4, 0, 1, 2, 3))
        if x._needs:
            gcols = (wm @ gf).reshape(ci, 27, n, d, h, w)
            gxp = np.zeros_like(xp)
            for j, (dz, dy, dx) in enumerate(_OFFSETS):
                gxp[:, :, dz : dz + d, dy : dy + h, dx : dx + w] += gcols[:, j].transpose(
                    1, 0, 2, 3, 4
                )
            _accum(x, gxp[:, :, 1:-1, 1:-1, 1:-1])

    return _make(out, (x, weight, bias), backward)


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over (N, D, H, W); biased variance throughout.

    Training mode normalizes with batch statistics and folds them into
    the running buffers (which are plain arrays, mutated in place); eval
    mode normalizes with the running buffers.
    """
    if x.data.ndim != 5:
        raise ShapeMismatchError(f"batchnorm3d input must be 5-D, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ShapeMismatchError(f"batchnorm3d parameters must be ({c},)")
    axes = (0, 2, 3, 4)

    def bc(v):
        return v.reshape(1, c, 1, 1, 1)

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - bc(mu)) * bc(inv)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        inv = 1.0 / np.sqrt(running_var.astype(x.dtype) + eps)
        xhat = (x.data - bc(running_mean.astype(x.dtype))) * bc(inv)
    out = bc(gamma.data) * xhat + bc(beta.data)

    def backward(g):
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, (g * xhat).sum(axis=axes))
        if not x._needs:
            return
        dxhat = g * bc(gamma.data)
        if training:
            m = dxhat.mean(axis=axes)
            mx = (dxhat * xhat).mean(axis=axes)
            _accum(x, bc(inv) * (dxhat - bc(m) - xhat * bc(mx)))
        else:
            _accum(x, dxhat * bc(inv))

    return _make(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, x.dtype.type(0))

    def backward(g):
        _accum(x, g * mask)

    return _make(out, (x,), backward)


def maxpool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2x2 max pooling, stride 2; odd trailing voxels are dropped.

    Gradient routes to the window argmax; ties go to the lowest linear
    index within the window.
    """
    if window != 2 or stride != 2:
        raise ShapeMismatchError("only window=2, stride=2 pooling is supported")
    if x.data.ndim != 5:
        raise ShapeMismatchError(f"maxpool3d input must be 5-D, got {x.shape}")
    n, c, d, h, w = x.shape
    d2, h2, w2 = d // 2, h // 2, w // 2
    xt = x.data[:, :, : d2 * 2, : h2 * 2, : w2 * 2]
    win = (
        xt.reshape(n, c, d2, 2, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d2, h2, w2, 8)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, d2, h2, w2, 8), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : d2 * 2, : h2 * 2, : w2 * 2] = (
            gwin.reshape(n, c, d2, h2, w2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(n, c, d2 * 2, h2 * 2, w2 * 2)
        )
        _accum(x, gx)

    return _make(np.ascontiguousarray(out), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"linear input must be 2-D, got {x.shape}")
    fout, fin = weight.shape
    if x.shape[1] != fin or bias.shape != (fout,):
        raise ShapeMismatchError(
            f"linear shapes incompatible: x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        _accum(bias, g.sum(axis=0))
        if weight._needs:
            _accum(weight, g.T @ x.data)
        if x._needs:
            _accum(x, g @ weight.data)

    return _make(out, (x, weight, bias), backward)


def flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...)) view-preserving reshape."""
    n = x.shape[0]
    shape = x.shape
    out = x.data.reshape(n, -1)

    def backward(g):
        _accum(x, g.reshape(shape))

    return _make(out, (x,), backward)


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; gradient is sign(pred - target)/N, 0 at ties."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ShapeMismatchError(f"mae_loss shapes differ: {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    out = np.abs(diff).mean(dtype=pred.dtype)

    def backward(g):
        _accum(pred, g * np.sign(diff) / diff.size)

    return _make(np.asarray(out), (pred,), backward)


@dataclass
class AdamState:
    """First/second moment buffers, one pair per parameter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: list[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
