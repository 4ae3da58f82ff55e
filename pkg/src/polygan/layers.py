"""Neural network layers and the Adam optimizer.

Convolutions are im2col/col2im matmuls so that forward and both backward
passes run as BLAS calls.  ``conv_transpose2d`` is implemented as the exact
adjoint of ``conv2d`` (shared helpers), which the tests pin down through the
inner-product identity <conv(x), y> == <x, conv_T(y)>.

Parameters live in :class:`Parameter` holders; a :class:`Tape` maps them to
graph leaves for one forward/backward pass and decides which of them receive
gradients.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .autodiff import Node, leaf
from .errors import NumericError, ShapeError
from .rng import RngState
from .tensor import TRAIN_DTYPE, Tensor


# ---------------------------------------------------------------------------
# raw convolution arithmetic


def _im2col(xp: Tensor, k: int, stride: int, ho: int, wo: int) -> Tensor:
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for dy in range(k):
        ylim = dy + (ho - 1) * stride + 1
        for dx in range(k):
            xlim = dx + (wo - 1) * stride + 1
            cols[:, :, dy, dx] = xp[:, :, dy:ylim:stride, dx:xlim:stride]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(dcols: Tensor, c: int, k: int, stride: int, hp: int, wp: int, ho: int, wo: int) -> Tensor:
    b = dcols.shape[0]
    d = dcols.reshape(b, c, k, k, ho, wo)
    out = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    for dy in range(k):
        ylim = dy + (ho - 1) * stride + 1
        for dx in range(k):
            xlim = dx + (wo - 1) * stride + 1
            out[:, :, dy:ylim:stride, dx:xlim:stride] += d[:, :, dy, dx]
    return out


def _pad_hw(x: Tensor, p: int) -> Tensor:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _conv_fwd(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    b, _, h, wid = x.shape
    co, ci, k, _ = w.shape
    ho, wo = _conv_out_extent(h, k, stride, pad), _conv_out_extent(wid, k, stride, pad)
    cols = _im2col(_pad_hw(x, pad), k, stride, ho, wo)
    out = np.matmul(w.reshape(co, ci * k * k)[None], cols)
    return out.reshape(b, co, ho, wo)


def _conv_dx(g: Tensor, w: Tensor, stride: int, pad: int, h: int, wid: int) -> Tensor:
    b, co, ho, wo = g.shape
    _, ci, k, _ = w.shape
    dcols = np.matmul(w.reshape(co, ci * k * k).T[None], g.reshape(b, co, ho * wo))
    dxp = _col2im(dcols, ci, k, stride, h + 2 * pad, wid + 2 * pad, ho, wo)
    if pad:
        dxp = np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def _conv_dw(x: Tensor, g: Tensor, stride: int, pad: int, k: int) -> Tensor:
    b, ci, _, _ = x.shape
    _, co, ho, wo = g.shape
    cols = _im2col(_pad_hw(x, pad), k, stride, ho, wo)
    dw = np.matmul(g.reshape(b, co, ho * wo), cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(co, ci, k, k)


# ---------------------------------------------------------------------------
# graph ops


def conv2d(x: Node, weight: Node, bias: Optional[Node], stride: int, padding: int) -> Node:
    """Cross-correlation with bias; weight is (out_ch, in_ch, k, k)."""
    if x.value.ndim != 4 or weight.value.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weight, got {x.value.shape}, {weight.value.shape}")
    b, c, h, wid = x.value.shape
    co, ci, k, k2 = weight.value.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {weight.value.shape}")
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if h + 2 * padding < k or wid + 2 * padding < k:
        raise ShapeError(f"conv2d: spatial extent {(h, wid)} smaller than kernel {k} after padding")
    out = _conv_fwd(x.value, weight.value, stride, padding)
    if bias is not None:
        out = out + bias.value[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        dx = _conv_dx(g, weight.value, stride, padding, h, wid) if x.requires_grad else None
        dw = _conv_dw(x.value, g, stride, padding, k) if weight.requires_grad else None
        if bias is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return dx, dw, db

    return Node(out, "conv2d", parents, vjp=vjp)


def conv_transpose2d(x: Node, weight: Node, bias: Optional[Node], stride: int, padding: int) -> Node:
    """Adjoint of conv2d; weight is (in_ch, out_ch, k, k)."""
    if x.value.ndim != 4 or weight.value.ndim != 4:
        raise ShapeError(f"conv_transpose2d: need 4-d input/weight, got {x.value.shape}, {weight.value.shape}")
    b, c, h, wid = x.value.shape
    ci, co, k, k2 = weight.value.shape
    if k != k2:
        raise ShapeError(f"conv_transpose2d: non-square kernel {weight.value.shape}")
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wid - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: degenerate output extent {(ho, wo)}")
    out = _conv_dx(x.value, weight.value, stride, padding, ho, wo)
    if bias is not None:
        out = out + bias.value[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        dx = _conv_fwd(g, weight.value, stride, padding) if x.requires_grad else None
        dw = _conv_dw(g, x.value, stride, padding, k) if weight.requires_grad else None
        if bias is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return dx, dw, db

    return Node(out, "conv_transpose2d", parents, vjp=vjp)


def instance_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    """Per-(batch, channel) plane normalization over H x W."""
    if x.value.ndim != 4:
        raise ShapeError(f"instance_norm: need 4-d input, got {x.value.shape}")
    _, c, h, w = x.value.shape
    if h * w < 2:
        raise ShapeError("instance_norm: spatial plane must have >= 2 elements")
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(f"instance_norm: gamma/beta must be ({c},)")
    mu = x.value.mean(axis=(2, 3), keepdims=True, dtype=x.value.dtype)
    xc = x.value - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True, dtype=x.value.dtype)
    inv = 1.0 / np.sqrt(var + x.value.dtype.type(eps))
    xhat = xc * inv
    out = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        if x.requires_grad:
            dxhat = g * gamma.value[None, :, None, None]
            m1 = dxhat.mean(axis=(2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
        else:
            dx = None
        return dx, dgamma, dbeta

    return Node(out, "instance_norm", (x, gamma, beta), vjp=vjp)


def avg_pool2d(x: Node, factor: int) -> Node:
    """Non-overlapping block mean; factor must divide both spatial extents."""
    if x.value.ndim != 4:
        raise ShapeError(f"avg_pool2d: need 4-d input, got {x.value.shape}")
    b, c, h, w = x.value.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: factor {factor} does not divide extents {(h, w)}")
    if factor == 1:
        return Node(x.value, "avg_pool", (x,), vjp=lambda g: (g,))
    ho, wo = h // factor, w // factor
    out = x.value.reshape(b, c, ho, factor, wo, factor).mean(axis=(3, 5), dtype=x.value.dtype)
    inv = 1.0 / (factor * factor)

    def vjp(g):
        gx = np.broadcast_to((g * g.dtype.type(inv))[:, :, :, None, :, None], (b, c, ho, factor, wo, factor))
        return (gx.reshape(b, c, h, w).copy(),)

    return Node(out, "avg_pool", (x,), vjp=vjp)


# ---------------------------------------------------------------------------
# parameter plumbing


class Parameter:
    """Mutable holder for one learnable tensor."""

    __slots__ = ("value",)

    def __init__(self, value: Tensor):
        self.value = value

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Maps Parameters to graph leaves for a single forward/backward pass.

    `trainable` restricts which parameters get requires_grad leaves; None
    means all of them.  Frozen parameters still join the graph so values flow,
    but backward skips their gradients.
    """

    def __init__(self, trainable: Optional[Iterable[Parameter]] = None):
        self._nodes: Dict[int, Node] = {}
        self._trainable = None if trainable is None else {id(p) for p in trainable}

    def node(self, p: Parameter) -> Node:
        n = self._nodes.get(id(p))
        if n is None:
            req = self._trainable is None or id(p) in self._trainable
            n = leaf(p.value, requires_grad=req)
            self._nodes[id(p)] = n
        return n

    def grad(self, p: Parameter) -> Optional[Tensor]:
        n = self._nodes.get(id(p))
        return None if n is None else n.grad


class Module:
    """Minimal container: parameters are discovered from attributes in
    declaration order, recursing through sub-modules and lists of them."""

    def parameters(self) -> List[Tuple[str, Parameter]]:
        out: List[Tuple[str, Parameter]] = []
        for attr, val in vars(self).items():
            if isinstance(val, Parameter):
                out.append((attr, val))
            elif isinstance(val, Module):
                out.extend((f"{attr}.{n}", p) for n, p in val.parameters())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{attr}.{i}.{n}", p) for n, p in item.parameters())
        return out

    def parameter_count(self) -> int:
        return sum(p.value.size for _, p in self.parameters())


def _init_conv_weight(shape, rng: RngState, dtype) -> Tensor:
    n = int(np.prod(shape))
    return (rng.normal(n).reshape(shape) * 0.02).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, padding: int,
                 rng: RngState, dtype=TRAIN_DTYPE, bias: bool = True):
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.padding = stride, padding
        self.weight = Parameter(_init_conv_weight((out_ch, in_ch, k, k), rng, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Node, tape: Tape) -> Node:
        b = tape.node(self.bias) if self.bias is not None else None
        return conv2d(x, tape.node(self.weight), b, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, padding: int,
                 rng: RngState, dtype=TRAIN_DTYPE):
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.padding = stride, padding
        self.weight = Parameter(_init_conv_weight((in_ch, out_ch, k, k), rng, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def forward(self, x: Node, tape: Tape) -> Node:
        return conv_transpose2d(x, tape.node(self.weight), tape.node(self.bias),
                                self.stride, self.padding)


class InstanceNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, dtype=TRAIN_DTYPE):
        self.channels = channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Node, tape: Tape) -> Node:
        return instance_norm(x, tape.node(self.gamma), tape.node(self.beta), self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: RngState, dtype=TRAIN_DTYPE):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(_init_conv_weight((in_features, out_features), rng, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Node, tape: Tape) -> Node:
        from .autodiff import linear
        return linear(x, tape.node(self.weight), tape.node(self.bias))


# ---------------------------------------------------------------------------
# optimizer


def adam_step(p: Tensor, g: Tensor, m: Tensor, v: Tensor, t: int,
              lr: float, beta1: float, beta2: float, eps: float) -> Tuple[Tensor, Tensor, Tensor]:
    """One bias-corrected Adam update; t is the post-increment step index."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    return p - lr * mhat / (np.sqrt(vhat) + eps), m, v


class Adam:
    """Adam over a fixed list of named parameters.

    Updates are per-parameter independent, so the result does not depend on
    the order gradients are handed in.
    """

    def __init__(self, named_params: List[Tuple[str, Parameter]],
                 lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {name: np.zeros_like(p.value) for name, p in self.named}
        self.v = {name: np.zeros_like(p.value) for name, p in self.named}
        self.t = 0

    def step(self, grads: Dict[str, Optional[Tensor]]):
        self.t += 1
        for name, p in self.named:
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.value)
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            p.value, self.m[name], self.v[name] = adam_step(
                p.value, g.astype(p.value.dtype, copy=False), self.m[name], self.v[name],
                self.t, self.lr, self.beta1, self.beta2, self.eps)

    def state_tensors(self) -> Dict[str, Tensor]:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: Dict[str, Tensor], t: int):
        for name, _ in self.named:
            self.m[name] = tensors[f"m.{name}"]
            self.v[name] = tensors[f"v.{name}"]
        self.t = int(t)
