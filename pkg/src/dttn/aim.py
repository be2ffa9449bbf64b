"""Antisymmetric interaction module.

Two branches apply a channel linear map and a depthwise 3x3 convolution in
opposite orders; their outputs interact through a Hadamard product, are
(optionally) layer-normalized, projected back to ``C`` channels and added to
the input through a scaled shortcut.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import CapacityError, ConfigurationError, DimensionError, StateError
from .layers import BatchNorm2d, Conv2d, LayerNorm2d, Linear, Module
from .tensor import khatri_rao

NORM_MODES = ("bn", "ln", "none")

MAX_PROBE_DIM = 4096
MAX_CUBE_DIM = 64


def _to_last(x):
    return x.transpose(0, 2, 3, 1)


def _to_first(x):
    return x.transpose(0, 3, 1, 2)


class AIM(Module):
    """One block.

    ``norm`` selects the normalization layout: ``"bn"`` (batch norm on both
    branches), ``"ln"`` (layer norm after the Hadamard product) or ``"none"``
    (purely multilinear; used for algebraic verification).  ``"bn"`` and
    ``"ln"`` both keep the residual batch norm.  ``shortcut=False`` drops the
    identity term.
    """

    def __init__(
        self,
        channels: int,
        r_exp: int = 3,
        norm: str = "bn",
        shortcut: bool = True,
        kernel: int = 3,
        rng=None,
        dtype=np.float32,
    ):
        super().__init__()
        if norm not in NORM_MODES:
            raise ConfigurationError(f"norm must be one of {NORM_MODES}, got {norm!r}")
        if kernel % 2 == 0:
            raise ConfigurationError("kernel must be odd to preserve spatial size")
        rng = rng if rng is not None else np.random.default_rng(0)
        C, CR = channels, channels * r_exp
        self.channels, self.r_exp, self.norm, self.shortcut = C, r_exp, norm, shortcut
        pad = kernel // 2
        self.proj_l = Linear(C, CR, rng=rng, dtype=dtype)
        self.conv_l = Conv2d(CR, CR, kernel, padding=pad, groups=CR, rng=rng, dtype=dtype)
        self.conv_r = Conv2d(C, CR, kernel, padding=pad, groups=C, rng=rng, dtype=dtype)
        self.proj_r = Linear(CR, CR, rng=rng, dtype=dtype)
        self.proj = Conv2d(CR, C, 1, rng=rng, dtype=dtype)
        self.ln = LayerNorm2d(CR, dtype=dtype) if norm == "ln" else None
        self.bn_l = BatchNorm2d(CR, dtype=dtype) if norm == "bn" else None
        self.bn_r = BatchNorm2d(CR, dtype=dtype) if norm == "bn" else None
        self.bn_res = BatchNorm2d(C, dtype=dtype) if norm != "none" else None
        self.params["scale"] = np.ones(1, dtype=dtype)
        self.folded = False

    # -- branches ---------------------------------------------------------

    def branch_l(self, x):
        return self.conv_l(_to_first(self.proj_l(_to_last(x))))

    def branch_r(self, x):
        return _to_first(self.proj_r(_to_last(self.conv_r(x))))

    def _project(self, out):
        z = self.proj(out)
        if self.bn_res is not None:
            z = self.bn_res(z)
        return z

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"AIM expects B x {self.channels} x H x W, got {x.shape}")
        xl = self.branch_l(x)
        xr = self.branch_r(x)
        if self.folded:
            out = xl * xr
            if self.ln is not None:
                out = self.ln(out)
            z = self.proj(out)
            return x + z if self.shortcut else z
        if self.bn_l is not None:
            nl, nr = self.bn_l(xl), self.bn_r(xr)
            out = nl * nr
            self._cache = (nl, nr)
        else:
            prod = xl * xr
            out = self.ln(prod) if self.ln is not None else prod
            self._cache = (xl, xr)
        z = self._project(out)
        self._z = z
        y = self.params["scale"] * z
        return x + y if self.shortcut else y

    def backward(self, g):
        if self.folded:
            raise StateError("adjoint of a folded block is not supported; train the unfolded form")
        gz = g * self.params["scale"]
        self.grads = {"scale": np.array([np.sum(g * self._z)], dtype=g.dtype)}
        if self.bn_res is not None:
            gz = self.bn_res.backward(gz)
        gout = self.proj.backward(gz)
        a, b = self._cache
        if self.bn_l is not None:
            gl = self.bn_l.backward(gout * b)
            gr = self.bn_r.backward(gout * a)
        else:
            gprod = self.ln.backward(gout) if self.ln is not None else gout
            gl, gr = gprod * b, gprod * a
        gx = _to_first(self.proj_l.backward(_to_last(self.conv_l.backward(gl))))
        gx += self.conv_r.backward(_to_first(self.proj_r.backward(_to_last(gr))))
        return gx + g if self.shortcut else gx

    # -- structural re-parameterization --------------------------------------

    def fold_batchnorm(self) -> "AIM":
        """Absorb batch norms (eval statistics) and the residual gain into
        the adjacent convolution / linear weights, in place."""
        if self.folded:
            raise StateError("block is already folded")
        if self.bn_l is not None:
            a, c = self.bn_l.affine()
            w, b = self.conv_l.params["weight"], self.conv_l.params["bias"]
            self.conv_l.params["weight"] = w * a[:, None, None, None]
            self.conv_l.params["bias"] = b * a + c
            a, c = self.bn_r.affine()
            w, b = self.proj_r.params["weight"], self.proj_r.params["bias"]
            self.proj_r.params["weight"] = w * a[:, None]
            self.proj_r.params["bias"] = b * a + c
        s = self.params.pop("scale")
        if self.bn_res is not None:
            a, c = self.bn_res.affine()
        else:
            a = np.ones(self.channels, dtype=s.dtype)
            c = np.zeros(self.channels, dtype=s.dtype)
        w, b = self.proj.params["weight"], self.proj.params["bias"]
        self.proj.params["weight"] = w * (s * a)[:, None, None, None]
        self.proj.params["bias"] = s * (a * b + c)
        self.bn_l = self.bn_r = self.bn_res = None
        self.grads = {}
        self.folded = True
        return self

    # -- matrixization (tiny instances only) --------------------------------

    def _require_multilinear(self):
        if self.ln is not None:
            raise StateError("a block with layer norm is not multilinear and cannot be matrixized")
        if not self.folded and self.bn_l is not None:
            raise StateError("fold batch norms (or build with norm='none') before matrixizing")
        for name, arr in self.named_parameters():
            if name.endswith("bias") and np.any(arr != 0):
                raise StateError(f"bias {name} is nonzero; matrixization needs homogeneous mode")

    def _fused_proj(self, out):
        z = self.proj(out)
        if not self.folded:
            if self.bn_res is not None:
                z = self.bn_res(z)
            z = self.params["scale"] * z
        return z


@dataclass
class BranchMatrices:
    """Linear maps of one block on ``vec`` of a single C x H x W input.

    ``a1`` and ``a2`` are ``D' x D`` (branch responses), ``b`` is ``D x D'``
    (fused projection), with ``D = C*H*W`` and ``D' = C*R*H*W``.
    """

    a1: np.ndarray
    a2: np.ndarray
    b: np.ndarray


def branch_matrices(block: AIM, spatial: tuple[int, int]) -> BranchMatrices:
    """Recover the branch and projection matrices by probing with basis inputs."""
    block._require_multilinear()
    H, W = spatial
    C, CR = block.channels, block.channels * block.r_exp
    D, Dp = C * H * W, CR * H * W
    if Dp > MAX_PROBE_DIM:
        raise CapacityError(f"D'={Dp} exceeds probing guard {MAX_PROBE_DIM}")
    was_training = block.training
    block.eval()
    try:
        dtype = block.proj.params["weight"].dtype
        basis = np.eye(D, dtype=dtype).reshape(D, C, H, W)
        a1 = block.branch_l(basis).reshape(D, Dp).T
        a2 = block.branch_r(basis).reshape(D, Dp).T
        b = block._fused_proj(np.eye(Dp, dtype=dtype).reshape(Dp, CR, H, W)).reshape(Dp, D).T
    finally:
        block.train(was_training)
    return BranchMatrices(np.ascontiguousarray(a1), np.ascontiguousarray(a2), np.ascontiguousarray(b))


def structured_tensor(block: AIM, spatial: tuple[int, int]) -> np.ndarray:
    """The ``D^2 x D`` coefficient matrix of the block's quadratic term.

    Row ``w * D + rho``, column ``tau`` holds the weight of ``x_w * x_rho`` in
    output ``tau``; reshape to ``(D, D, D)`` for the cube form.
    """
    H, W = spatial
    D = block.channels * H * W
    if D > MAX_CUBE_DIM:
        raise CapacityError(f"D={D} exceeds structured-tensor guard {MAX_CUBE_DIM}")
    m = branch_matrices(block, spatial)
    return np.ascontiguousarray((m.b @ khatri_rao(m.a1.T, m.a2.T).T).T)


def aim_cost(C: int, R: int, k: int, H: int, W: int) -> dict:
    """Exact branch cost ratios and per-block totals (no norm layers).

    Ratios are branch-1 over branch-2 weight counts (and MACs) as exact
    fractions; totals include biases, MACs exclude bias additions and the
    Hadamard product.
    """
    if min(C, R, k, H, W) < 1:
        raise ConfigurationError("all cost inputs must be positive")
    hw = H * W
    b1 = R * k * k * C + R * C * C
    b2 = R * k * k * C + R * R * C * C
    params = (R * C * C + R * C) + 2 * (R * C * k * k + R * C) + (R * R * C * C + R * C) + (R * C * C + C)
    macs = hw * (2 * R * C * C + 2 * R * C * k * k + R * R * C * C)
    return {
        "params_branch_ratio": Fraction(b1, b2),
        "flops_branch_ratio": Fraction(b1 * hw, b2 * hw),
        "total_params": params,
        "total_macs": macs,
    }
