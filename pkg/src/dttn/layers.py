"""Differentiable layers with hand-written adjoints.

Each layer comes as a functional pair ``*_fwd(x, p) -> (y, ctx)`` and
``*_adj(grad_y, ctx) -> (grad_x, grads)`` plus a small :class:`Module`
wrapper that owns parameters, caches the context and stores gradients.
There are no activation functions anywhere in this package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, DimensionError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


# --------------------------------------------------------------------------
# parameter records
# --------------------------------------------------------------------------


@dataclass
class LinearParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray | None = None  # (out,)


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_ch, in_ch // groups, k, k)
    bias: np.ndarray | None = None
    groups: int = 1
    stride: int = 1
    padding: int = 0


@dataclass
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM


# --------------------------------------------------------------------------
# linear (trailing mode)
# --------------------------------------------------------------------------


def linear_fwd(x: np.ndarray, p: LinearParams):
    if x.shape[-1] != p.weight.shape[1]:
        raise DimensionError(f"linear expects trailing extent {p.weight.shape[1]}, got {x.shape[-1]}")
    y = x @ p.weight.T
    if p.bias is not None:
        y = y + p.bias
    return y, (x, p)


def linear_adj(grad_y: np.ndarray, ctx):
    x, p = ctx
    gx = grad_y @ p.weight
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grads = {"weight": g2.T @ x2}
    if p.bias is not None:
        grads["bias"] = g2.sum(axis=0)
    return gx, grads


# --------------------------------------------------------------------------
# grouped 2-d cross-correlation
# --------------------------------------------------------------------------


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"extent {n} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def conv2d_fwd(x: np.ndarray, p: ConvParams):
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects B x C x H x W, got shape {x.shape}")
    B, cin, H, W = x.shape
    cout, cg, k, k2 = p.weight.shape
    G, s, pad = p.groups, p.stride, p.padding
    if k != k2:
        raise DimensionError("only square kernels are supported")
    if cout % G or cin != G * cg:
        raise DimensionError(f"{cin} input channels incompatible with weight {p.weight.shape} and groups={G}")
    ho = conv_output_extent(H, k, s, pad)
    wo = conv_output_extent(W, k, s, pad)
    og = cout // G
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if cg == 1:
        # one input channel per group: repeat it og times and run depthwise in
        # channels-last layout so the inner loop runs over channels
        xg = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
        if og > 1:
            xg = np.repeat(xg, og, axis=3)
        w = np.ascontiguousarray(p.weight[:, 0].transpose(1, 2, 0))
        yh = np.zeros((B, ho, wo, cout), dtype=x.dtype)
        tmp = np.empty_like(yh)
        for u in range(k):
            for v in range(k):
                xs = xg[:, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s]
                np.multiply(xs, w[u, v], out=tmp)
                yh += tmp
        y = np.ascontiguousarray(yh.transpose(0, 3, 1, 2))
    else:
        xg = xp.reshape(B, G, cg, xp.shape[2], xp.shape[3])
        w = p.weight.reshape(G, og, cg, k, k)
        y = np.zeros((B, G, og, ho * wo), dtype=x.dtype)
        for u in range(k):
            for v in range(k):
                xs = xg[:, :, :, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s]
                y += w[None, :, :, :, u, v] @ xs.reshape(B, G, cg, ho * wo)
        y = y.reshape(B, cout, ho, wo)
    if p.bias is not None:
        y += p.bias[None, :, None, None]
    return y, (xg, x.shape, p, ho, wo)


def conv2d_adj(grad_y: np.ndarray, ctx):
    xg, xshape, p, ho, wo = ctx
    B, cin, H, W = xshape
    cout, cg, k, _ = p.weight.shape
    G, s, pad = p.groups, p.stride, p.padding
    og = cout // G
    gw = np.zeros_like(p.weight)
    gxg = np.zeros_like(xg)
    if cg == 1:
        w = np.ascontiguousarray(p.weight[:, 0].transpose(1, 2, 0))
        gh = np.ascontiguousarray(grad_y.transpose(0, 2, 3, 1))
        tmp = np.empty_like(gh)
        for u in range(k):
            for v in range(k):
                hs = slice(u, u + s * (ho - 1) + 1, s)
                vs = slice(v, v + s * (wo - 1) + 1, s)
                np.multiply(gh, xg[:, hs, vs], out=tmp)
                gw[:, 0, u, v] = tmp.reshape(-1, cout).sum(axis=0)
                np.multiply(gh, w[u, v], out=tmp)
                gxg[:, hs, vs] += tmp
        if og > 1:
            gxg = gxg.reshape(*gxg.shape[:3], G, og).sum(axis=4)
        gx = gxg.transpose(0, 3, 1, 2)
    else:
        w = p.weight.reshape(G, og, cg, k, k)
        gwg = gw.reshape(G, og, cg, k, k)
        g = grad_y.reshape(B, G, og, ho * wo)
        gm = g.transpose(1, 2, 0, 3).reshape(G, og, B * ho * wo)
        for u in range(k):
            for v in range(k):
                hs = slice(u, u + s * (ho - 1) + 1, s)
                vs = slice(v, v + s * (wo - 1) + 1, s)
                xs = xg[:, :, :, hs, vs].reshape(B, G, cg, ho * wo)
                gwg[:, :, :, u, v] = gm @ xs.transpose(1, 0, 3, 2).reshape(G, B * ho * wo, cg)
                gxg[:, :, :, hs, vs] += (w[:, :, :, u, v].transpose(0, 2, 1)[None] @ g).reshape(B, G, cg, ho, wo)
        gx = gxg.reshape(B, cin, gxg.shape[3], gxg.shape[4])
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    grads = {"weight": gw}
    if p.bias is not None:
        grads["bias"] = grad_y.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx), grads


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def batchnorm_fwd(x: np.ndarray, p: NormParams, mode: str = "train"):
    """Per-channel normalization of a B x C x H x W map."""
    C = x.shape[1]
    if p.gamma.shape != (C,):
        raise DimensionError(f"batchnorm over {p.gamma.shape[0]} channels got {C}")
    bshape = (1, C, 1, 1)
    if mode == "train":
        n = x.size // C
        if n < 2:
            raise DimensionError("batchnorm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean.reshape(bshape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        if p.running_mean is not None:
            m = p.momentum
            p.running_mean *= 1 - m
            p.running_mean += m * mean
            p.running_var *= 1 - m
            p.running_var += m * var * (n / (n - 1))
    elif mode == "eval":
        xc = x - p.running_mean.reshape(bshape)
        var = p.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv.reshape(bshape)
    y = xhat * p.gamma.reshape(bshape) + p.beta.reshape(bshape)
    return y, (xhat, inv, p, mode)


def batchnorm_adj(grad_y: np.ndarray, ctx):
    xhat, inv, p, mode = ctx
    C = xhat.shape[1]
    bshape = (1, C, 1, 1)
    grads = {"gamma": (grad_y * xhat).sum(axis=(0, 2, 3)), "beta": grad_y.sum(axis=(0, 2, 3))}
    scale = (p.gamma * inv).reshape(bshape)
    if mode == "eval":
        return grad_y * scale, grads
    n = xhat.size // C
    gx = scale / n * (
        n * grad_y - grads["beta"].reshape(bshape) - xhat * grads["gamma"].reshape(bshape)
    )
    return gx, grads


def layernorm_fwd(x: np.ndarray, p: NormParams):
    """Normalize the channel vector (axis 1) at every batch/spatial position."""
    C = x.shape[1]
    if p.gamma.shape != (C,):
        raise DimensionError(f"layernorm over {p.gamma.shape[0]} channels got {C}")
    bshape = (1, C) + (1,) * (x.ndim - 2)
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    return xhat * p.gamma.reshape(bshape) + p.beta.reshape(bshape), (xhat, inv, p)


def layernorm_adj(grad_y: np.ndarray, ctx):
    xhat, inv, p = ctx
    C = xhat.shape[1]
    bshape = (1, C) + (1,) * (xhat.ndim - 2)
    red = (0,) + tuple(range(2, xhat.ndim))
    grads = {"gamma": (grad_y * xhat).sum(axis=red), "beta": grad_y.sum(axis=red)}
    gh = grad_y * p.gamma.reshape(bshape)
    gx = inv / C * (C * gh - gh.sum(axis=1, keepdims=True) - xhat * (gh * xhat).sum(axis=1, keepdims=True))
    return gx, grads


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    # gain 1: there is no nonlinearity to compensate for
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal container: named parameters, buffers, gradients, train flag."""

    training = True

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads.get(k)
        for name, child in self.children():
            yield from child.named_grads(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise DimensionError(f"{name}: expected {arr.shape}, got {src.shape}")
            arr[...] = src

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            m.training = flag
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for m in self.modules():
            for store in (m.params, m.buffers):
                for k in store:
                    store[k] = store[k].astype(dtype)
            m.grads = {}
        return self

    def zero_grad(self) -> None:
        for m in self.modules():
            m.grads = {}

    def __call__(self, x):
        return self.forward(x)


class Linear(Module):
    """Linear map over the trailing mode."""

    def __init__(self, n_in: int, n_out: int, bias: bool = True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = kaiming_uniform(rng, (n_out, n_in), n_in, dtype)
        if bias:
            self.params["bias"] = np.zeros(n_out, dtype=dtype)

    @property
    def p(self) -> LinearParams:
        return LinearParams(self.params["weight"], self.params.get("bias"))

    def forward(self, x):
        y, self._ctx = linear_fwd(x, self.p)
        return y

    def backward(self, g):
        gx, self.grads = linear_adj(g, self._ctx)
        return gx


class Conv2d(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
        rng=None,
        dtype=np.float32,
    ):
        super().__init__()
        if cin % groups or cout % groups:
            raise ConfigurationError(f"channels {cin}->{cout} not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin // groups * kernel * kernel
        self.params["weight"] = kaiming_uniform(rng, (cout, cin // groups, kernel, kernel), fan_in, dtype)
        if bias:
            self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.groups, self.stride, self.padding = groups, stride, padding

    @property
    def p(self) -> ConvParams:
        return ConvParams(self.params["weight"], self.params.get("bias"), self.groups, self.stride, self.padding)

    def forward(self, x):
        y, self._ctx = conv2d_fwd(x, self.p)
        return y

    def backward(self, g):
        gx, self.grads = conv2d_adj(g, self._ctx)
        return gx


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.eps, self.momentum = eps, momentum

    @property
    def p(self) -> NormParams:
        return NormParams(
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            self.eps,
            self.momentum,
        )

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode map as ``y = a * x + c`` per channel."""
        a = self.params["gamma"] / np.sqrt(self.buffers["running_var"] + self.eps)
        return a, self.params["beta"] - a * self.buffers["running_mean"]

    def forward(self, x):
        y, self._ctx = batchnorm_fwd(x, self.p, "train" if self.training else "eval")
        return y

    def backward(self, g):
        gx, self.grads = batchnorm_adj(g, self._ctx)
        return gx


class LayerNorm2d(Module):
    """Layer norm across channels of a B x C x H x W map."""

    def __init__(self, channels: int, eps: float = LN_EPS, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.eps = eps

    def forward(self, x):
        p = NormParams(self.params["gamma"], self.params["beta"], eps=self.eps)
        y, self._ctx = layernorm_fwd(x, p)
        return y

    def backward(self, g):
        gx, self.grads = layernorm_adj(g, self._ctx)
        return gx


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1.0) -> float:
    # the floor keeps exactly-zero gradients (e.g. a bias feeding a batch
    # norm) from turning finite-difference noise into a relative error of 1
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max() / scale)


def grad_check(layer: Module, input_shape, seed: int = 0, eps: float = 1e-5, dtype=np.float64) -> float:
    """Worst relative error between adjoint and central-difference gradients.

    The scalar loss is ``sum(r * layer(x))`` for a random ``r``.  Errors are
    measured per tensor as max-abs difference over the larger of the
    max-abs magnitude and 1.
    Buffers (batch-norm running statistics) are restored around every probe.
    """
    rng = np.random.default_rng(seed)
    layer.astype(dtype)
    x = rng.standard_normal(input_shape).astype(dtype)
    saved = {k: v.copy() for k, v in layer.named_buffers()}

    def restore():
        for k, v in layer.named_buffers():
            v[...] = saved[k]

    y = layer.forward(x)
    r = rng.standard_normal(y.shape).astype(dtype)
    gx = layer.backward(r)
    analytic = {name: g.copy() for name, g in layer.named_grads()}
    restore()

    def loss() -> float:
        out = float(np.sum(r * layer.forward(x)))
        restore()
        return out

    def numeric(arr: np.ndarray) -> np.ndarray:
        out = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss()
            flat[i] = orig - eps
            fm = loss()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        return out

    worst = _rel_err(gx, numeric(x))
    for name, arr in layer.named_parameters():
        worst = max(worst, _rel_err(analytic[name], numeric(arr)))
    return worst
