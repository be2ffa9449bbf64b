"""DTTN assembly: patch embedding, four stages of AIM blocks, pooled head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .aim import AIM
from .errors import ConfigurationError, DimensionError
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .tensor import DTYPES

N_STAGES = 4


@dataclass
class ModelConfig:
    stage_blocks: tuple[int, ...] = (2, 2, 4, 2)
    stage_hidden: tuple[int, ...] = (16, 32, 32, 32)
    r_exp: int = 3
    use_ln: bool = True
    img_channels: int = 1
    img_size: tuple[int, int] = (32, 32)
    classes: int = 10
    seed: int = 0
    dtype: str = "f32"
    variant: str = "custom"
    # verification switches; the trained network always has both enabled
    norms: bool = True
    shortcut: bool = True

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.stage_hidden = tuple(int(h) for h in self.stage_hidden)
        if isinstance(self.img_size, int):
            self.img_size = (self.img_size, self.img_size)
        self.img_size = tuple(int(s) for s in self.img_size)

    @property
    def n_blocks(self) -> int:
        return sum(self.stage_blocks)

    @property
    def norm(self) -> str:
        if not self.norms:
            return "none"
        return "ln" if self.use_ln else "bn"

    def validate(self) -> "ModelConfig":
        if len(self.stage_blocks) != N_STAGES or len(self.stage_hidden) != N_STAGES:
            raise ConfigurationError(f"need {N_STAGES} stage_blocks and stage_hidden entries")
        if any(b < 0 for b in self.stage_blocks) or self.n_blocks < 1:
            raise ConfigurationError("stage_blocks must be non-negative with at least one block")
        if any(h < 1 for h in self.stage_hidden) or min(self.r_exp, self.img_channels, self.classes) < 1:
            raise ConfigurationError("hidden sizes, r_exp, img_channels and classes must be positive")
        if any(s % 32 for s in self.img_size):
            raise ConfigurationError(
                f"img_size {self.img_size} must be divisible by 32 (pad the input, e.g. 28 -> 32)"
            )
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}")
        return self

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


PRESETS: dict[str, ModelConfig] = {
    "tiny": ModelConfig((6, 6, 16, 6), (64, 128, 160, 192), 3, False, 3, (224, 224), 1000, variant="tiny"),
    "small": ModelConfig((6, 6, 24, 8), (96, 128, 192, 192), 3, False, 3, (224, 224), 1000, variant="small"),
    "large": ModelConfig((8, 8, 32, 8), (128, 192, 256, 384), 3, False, 3, (224, 224), 1000, variant="large"),
    "desk": ModelConfig((2, 2, 4, 2), (16, 32, 32, 32), 3, True, 1, (32, 32), 10, variant="desk"),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides)


# --------------------------------------------------------------------------
# components
# --------------------------------------------------------------------------


class PatchEmbed(Module):
    """Two stride-2, 2x2 convolutions: ``C_img -> d -> d``, spatial / 4."""

    def __init__(self, img_channels: int, dim: int, rng=None, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(img_channels, dim, 2, stride=2, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(dim, dim, 2, stride=2, rng=rng, dtype=dtype)

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ConfigurationError(f"patch embedding needs H, W divisible by 4, got {x.shape[2:]}; pad the input")
        return self.conv2(self.conv1(x))

    def backward(self, g):
        return self.conv1.backward(self.conv2.backward(g))


class Downsample(Module):
    """Stride-2, 2x2 convolution changing the width, then batch norm."""

    def __init__(self, cin: int, cout: int, norm: bool = True, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 2, stride=2, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype) if norm else None

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ConfigurationError(f"downsampling needs even extents, got {x.shape[2:]}")
        y = self.conv(x)
        return self.bn(y) if self.bn is not None else y

    def backward(self, g):
        if self.bn is not None:
            g = self.bn.backward(g)
        return self.conv.backward(g)

    def fold_batchnorm(self):
        if self.bn is None:
            return self
        a, c = self.bn.affine()
        self.conv.params["weight"] = self.conv.params["weight"] * a[:, None, None, None]
        self.conv.params["bias"] = self.conv.params["bias"] * a + c
        self.bn = None
        return self


class Head(Module):
    """Global average pool followed by a linear classifier."""

    def __init__(self, dim: int, classes: int, rng=None, dtype=np.float32):
        super().__init__()
        self.fc = Linear(dim, classes, rng=rng, dtype=dtype)

    def forward(self, x):
        self._hw = x.shape[2:]
        return self.fc(x.mean(axis=(2, 3)))

    def backward(self, g):
        h, w = self._hw
        gp = self.fc.backward(g) / (h * w)
        return np.broadcast_to(gp[:, :, None, None], gp.shape + (h, w)).copy()


class Stage(Module):
    def __init__(self, blocks: list[AIM], down: Downsample | None = None):
        super().__init__()
        self.down = down
        self.blocks = blocks

    def forward(self, x):
        if self.down is not None:
            x = self.down(x)
        for blk in self.blocks:
            x = blk(x)
        return x

    def backward(self, g):
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        if self.down is not None:
            g = self.down.backward(g)
        return g


class DttnModel(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = DTYPES[cfg.dtype]
        d = cfg.stage_hidden
        self.embed = PatchEmbed(cfg.img_channels, d[0], rng=rng, dtype=dtype)
        stages = []
        for s in range(N_STAGES):
            down = Downsample(d[s - 1], d[s], norm=cfg.norms, rng=rng, dtype=dtype) if s else None
            blocks = [
                AIM(d[s], cfg.r_exp, norm=cfg.norm, shortcut=cfg.shortcut, rng=rng, dtype=dtype)
                for _ in range(cfg.stage_blocks[s])
            ]
            stages.append(Stage(blocks, down))
        self.stages = stages
        self.head = Head(d[-1], cfg.classes, rng=rng, dtype=dtype)

    @property
    def blocks(self) -> list[AIM]:
        return [b for st in self.stages for b in st.blocks]

    @property
    def folded(self) -> bool:
        return any(b.folded for b in self.blocks)

    def forward(self, x):
        expect = (self.cfg.img_channels,) + self.cfg.img_size
        if x.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise DimensionError(f"expected input B x {' x '.join(map(str, expect))}, got {x.shape}")
        h = self.embed(x)
        for st in self.stages:
            h = st(h)
        return self.head(h)

    def backward(self, g):
        g = self.head.backward(g)
        for st in reversed(self.stages):
            g = st.backward(g)
        return self.embed.backward(g)

    def fold_batchnorm(self) -> "DttnModel":
        """Fold every batch norm into its neighbour (eval statistics)."""
        for blk in self.blocks:
            blk.fold_batchnorm()
        for st in self.stages:
            if st.down is not None:
                st.down.fold_batchnorm()
        return self.eval()


def build(cfg: ModelConfig) -> DttnModel:
    return DttnModel(cfg)


def predict(logits_or_model, x=None) -> np.ndarray:
    """Arg-max class indices; ties go to the lowest index."""
    logits = logits_or_model.forward(x) if x is not None else np.asarray(logits_or_model)
    return np.argmax(logits, axis=-1)


def zero_biases(module: Module) -> Module:
    for m in module.modules():
        if "bias" in m.params:
            m.params["bias"][...] = 0
    return module


# --------------------------------------------------------------------------
# cost accounting
# --------------------------------------------------------------------------


def embed_params(c_img: int, d: int) -> int:
    return (4 * c_img + 1) * d + (4 * d + 1) * d


def aim_params(d: int, r: int) -> int:
    return 22 * r * d + (2 * r + r * r) * d * d + d


def head_params(d: int, m: int) -> int:
    """Head count in the closed form ``d * (m + 1)``.

    A biased ``d -> m`` linear layer actually holds ``d * m + m`` values; the
    enumerated count reports that figure.
    """
    return d * (m + 1)


def downsample_params(cin: int, cout: int) -> int:
    return 4 * cin * cout + cout


def stage_extents(cfg: ModelConfig) -> list[tuple[int, int]]:
    H, W = cfg.img_size
    return [(H // 4 >> s, W // 4 >> s) for s in range(N_STAGES)]


def count_params_analytic(cfg: ModelConfig) -> dict[str, int]:
    d, r = cfg.stage_hidden, cfg.r_exp
    out = {
        "embed": embed_params(cfg.img_channels, d[0]),
        "blocks": sum(n * aim_params(ds, r) for n, ds in zip(cfg.stage_blocks, d)),
        "downsamplers": sum(downsample_params(d[s - 1], d[s]) for s in range(1, N_STAGES)),
        "head": head_params(d[-1], cfg.classes),
    }
    out["total"] = sum(out.values())
    return out


def count_flops_analytic(cfg: ModelConfig) -> dict[str, dict[str, int]]:
    """Multiply-accumulate counts per component, recomputed per stage.

    Bias additions, normalization and the Hadamard product are not counted;
    the pooling in the head is counted one add per input value.
    """
    H, W = cfg.img_size
    d, r, c = cfg.stage_hidden, cfg.r_exp, cfg.img_channels
    ext = stage_extents(cfg)
    embed = (H // 2) * (W // 2) * d[0] * c * 4 + (H // 4) * (W // 4) * d[0] * d[0] * 4
    blocks = sum(
        n * h * w * (18 * r * ds + (2 * r + r * r) * ds * ds)
        for n, ds, (h, w) in zip(cfg.stage_blocks, d, ext)
    )
    downs = sum(ext[s][0] * ext[s][1] * d[s] * d[s - 1] * 4 for s in range(1, N_STAGES))
    h, w = ext[-1]
    head = h * w * d[-1] + cfg.classes * d[-1]
    macs = {"embed": embed, "blocks": blocks, "downsamplers": downs, "head": head}
    macs["total"] = sum(macs.values())
    return {"macs": macs, "flops": {k: 2 * v for k, v in macs.items()}}


def enumerate_params(model: DttnModel) -> dict[str, int]:
    """Walk every buffer of a built model.

    ``embed``, ``blocks``, ``downsamplers`` and ``head`` count foldable
    weights and biases only; normalization affine terms plus the residual
    gains go to ``norm_affine`` and running statistics to ``norm_stats``.
    ``total`` is every trainable value.
    """
    counts = dict.fromkeys(["embed", "blocks", "downsamplers", "head", "norm_affine", "norm_stats"], 0)
    for name, arr in model.named_parameters():
        if ".bn" in name or ".ln." in name or name.endswith("scale"):
            counts["norm_affine"] += arr.size
        elif name.startswith("embed."):
            counts["embed"] += arr.size
        elif name.startswith("head."):
            counts["head"] += arr.size
        elif ".down." in name:
            counts["downsamplers"] += arr.size
        else:
            counts["blocks"] += arr.size
    counts["norm_stats"] = sum(arr.size for _, arr in model.named_buffers())
    counts["weights"] = counts["embed"] + counts["blocks"] + counts["downsamplers"] + counts["head"]
    counts["total"] = counts["weights"] + counts["norm_affine"]
    return counts
