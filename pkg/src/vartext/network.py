"""Detector network: VGG-style backbone, stacked BiFPN, latent bottlenecks, head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import Conv, ConvBNReLU, Module, Sequential
from .tensor.core import make_result as _make_result
from .tensor import (
    ShapeError,
    Tensor,
    clamp,
    concat,
    log,
    maxpool2,
    resize_area,
    resize_bilinear,
    scalar_mul,
    sigmoid,
)

NUM_LEVELS = 5
PROB_EPS = 1e-4
BACKBONE_BLOCKS = (2, 2, 3, 3, 3)
BACKBONE_WIDTHS = (64, 128, 256, 512, 512)


@dataclass
class ModelConfig:
    width_mult: float = 1.0
    num_bifpn: int = 3
    use_bifpn: bool = True
    use_bottleneck_kl: bool = True
    fusion_eps: float = 1e-4
    relax_temperature: float = 0.5
    num_levels: int = NUM_LEVELS
    # Floor on every scaled conv width. At width_mult 0.125 the 16- and
    # 32-filter head/bottleneck layers would shrink to 2 and 4 channels; the
    # resulting maps stay too flat to threshold after a 500-iteration run.
    min_width: int = 16

    def __post_init__(self):
        if self.num_levels != NUM_LEVELS:
            raise ValueError("num_levels is fixed at 5")
        if self.width_mult * 64 < 2:
            raise ValueError("width_mult too small: 64 * width_mult must be >= 2")
        if self.fusion_eps <= 0:
            raise ValueError("fusion_eps must be positive")
        if self.relax_temperature <= 0:
            raise ValueError("relax_temperature must be positive")
        if self.num_bifpn < 1:
            raise ValueError("num_bifpn must be >= 1")
        if self.min_width < 1:
            raise ValueError("min_width must be >= 1")

    @classmethod
    def for_ablation(cls, name: str, **kwargs) -> "ModelConfig":
        flags = {
            "baseline": (False, False),
            "bifpn": (True, False),
            "kl": (False, True),
            "full": (True, True),
        }
        if name not in flags:
            raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(flags)}")
        use_bifpn, use_kl = flags[name]
        return cls(use_bifpn=use_bifpn, use_bottleneck_kl=use_kl, **kwargs)

    def width(self, base: int) -> int:
        return max(self.min_width, int(round(base * self.width_mult)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentStack:
    """Per-level posterior Bernoulli parameters, prior targets and samples."""

    theta: list = field(default_factory=list)
    prior_target: list = field(default_factory=list)
    z_sample: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.theta)

    @property
    def empty(self) -> bool:
        return not self.theta


# -- fusion -----------------------------------------------------------------------

def fast_normalized_fuse(inputs, raw_weights: Tensor, eps: float = 1e-4) -> Tensor:
    """sum_i relu(w_i) x_i / (sum_i relu(w_i) + eps)."""
    if len(inputs) == 0:
        raise ValueError("fast_normalized_fuse: empty input list")
    if raw_weights.shape != (len(inputs),):
        raise ShapeError(f"expected {len(inputs)} raw weights, got shape {raw_weights.shape}")
    shape = inputs[0].shape
    for x in inputs[1:]:
        if x.shape != shape:
            raise ShapeError(f"fusion inputs differ in shape: {shape} vs {x.shape}")
    w = raw_weights.data.astype(inputs[0].dtype)
    active = w > 0
    r = np.where(active, w, 0)
    denom = r.sum() + eps
    out = sum(ri * x.data for ri, x in zip(r, inputs)) / denom

    def backward(g):
        grads = [g * (ri / denom) for ri in r]
        gout = float((g * out).sum())
        gw = np.array([(float((g * x.data).sum()) - gout) / denom if a else 0.0
                       for x, a in zip(inputs, active)], dtype=raw_weights.dtype)
        return (*grads, gw)

    return _make_result(out.astype(inputs[0].dtype), (*inputs, raw_weights), backward)


def normalized_coefficients(raw_weights: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    r = np.maximum(np.asarray(raw_weights, dtype=np.float64), 0.0)
    return r / (r.sum() + eps)


def relaxed_bernoulli_sample(theta: Tensor, temperature: float, u) -> Tensor:
    """Binary-Concrete reparameterized sample, differentiable w.r.t. ``theta``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=theta.dtype)
    if u.shape != theta.shape:
        raise ShapeError(f"noise shape {u.shape} != theta shape {theta.shape}")
    noise = np.log(u) - np.log1p(-u)
    logits = log(theta) - log(1.0 - theta)
    return sigmoid(scalar_mul(logits + noise, 1.0 / temperature))


# -- blocks -----------------------------------------------------------------------

class Backbone(Module):
    """13 conv-BN-ReLU layers in five blocks with a 1x1 lateral per tap."""

    def __init__(self, rng, cfg: ModelConfig):
        self.blocks = []
        self.laterals = []
        c_in = 3
        out_w = cfg.width(64)
        for n_layers, base in zip(BACKBONE_BLOCKS, BACKBONE_WIDTHS):
            c = cfg.width(base)
            layers = []
            for _ in range(n_layers):
                layers.append(ConvBNReLU(rng, c_in, c, 3))
                c_in = c
            self.blocks.append(Sequential(*layers))
            self.laterals.append(Conv(rng, c, out_w, 1))

    def __call__(self, image: Tensor, mode: str = "train") -> list[Tensor]:
        _, _, H, W = image.shape
        if H % 32 or W % 32:
            raise ShapeError(f"input size {H}x{W} must be divisible by 32")
        taps = []
        x = image
        for block, lateral in zip(self.blocks, self.laterals):
            x = maxpool2(block(x, mode))
            taps.append(lateral(x, mode))
        return taps


class BiFPNLayer(Module):
    """One top-down + bottom-up pass with fast normalized fusion at each node."""

    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.width(64)
        mid = cfg.width(128)
        self.eps = cfg.fusion_eps
        # top-down nodes for levels 4..1 (index 0 = level 1)
        self.td_weights = [Tensor(np.ones(2), requires_grad=True) for _ in range(4)]
        self.td_convs = [Sequential(ConvBNReLU(rng, c, mid, 1), ConvBNReLU(rng, mid, c, 3))
                         for _ in range(4)]
        # bottom-up nodes for levels 2..5 (index 0 = level 2); level 5 has no td input
        self.out_weights = [Tensor(np.ones(3 if lvl < 5 else 2), requires_grad=True)
                            for lvl in range(2, 6)]
        self.out_convs = [Sequential(ConvBNReLU(rng, c, mid, 1), ConvBNReLU(rng, mid, c, 3))
                          for _ in range(4)]

    def __call__(self, feats: list[Tensor], mode: str = "train") -> list[Tensor]:
        f_in = feats
        td = [None] * NUM_LEVELS
        upper = f_in[4]
        for lvl in range(3, -1, -1):
            h, w = f_in[lvl].shape[2:]
            fused = fast_normalized_fuse(
                [f_in[lvl], resize_bilinear(upper, h, w)], self.td_weights[lvl], self.eps)
            td[lvl] = self.td_convs[lvl](fused, mode)
            upper = td[lvl]
        out = [td[0]]
        for lvl in range(1, NUM_LEVELS):
            h, w = f_in[lvl].shape[2:]
            lower = resize_area(out[lvl - 1], h, w)
            parts = [f_in[lvl], td[lvl], lower] if lvl < 4 else [f_in[lvl], lower]
            fused = fast_normalized_fuse(parts, self.out_weights[lvl - 1], self.eps)
            out.append(self.out_convs[lvl - 1](fused, mode))
        return out

    def coefficients(self) -> dict[str, np.ndarray]:
        coefs = {}
        for i, w in enumerate(self.td_weights):
            coefs[f"td{i + 1}"] = normalized_coefficients(w.data, self.eps)
        for i, w in enumerate(self.out_weights):
            coefs[f"out{i + 2}"] = normalized_coefficients(w.data, self.eps)
        return coefs


class Bottleneck(Module):
    """Reduce a level to a 2-channel Bernoulli map, then decode back."""

    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.width(64)
        c32, c16 = cfg.width(32), cfg.width(16)
        self.reduce = Sequential(ConvBNReLU(rng, c, c32, 1), ConvBNReLU(rng, c32, c16, 3))
        self.to_theta = Conv(rng, c16, 2, 3)
        self.expand = Sequential(ConvBNReLU(rng, 2, c16, 3), ConvBNReLU(rng, c16, c32, 3),
                                 ConvBNReLU(rng, c32, c, 1))

    def encode(self, x: Tensor, mode: str) -> Tensor:
        return clamp(sigmoid(self.to_theta(self.reduce(x, mode))), PROB_EPS, 1 - PROB_EPS)

    def decode(self, z: Tensor, mode: str) -> Tensor:
        return self.expand(z, mode)


class Head(Module):
    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.width(64)
        self.body = Sequential(
            ConvBNReLU(rng, NUM_LEVELS * c, cfg.width(32), 3),
            ConvBNReLU(rng, cfg.width(32), cfg.width(32), 3),
            ConvBNReLU(rng, cfg.width(32), cfg.width(16), 3),
        )
        self.out = Conv(rng, cfg.width(16), 2, 1)

    def __call__(self, feats: list[Tensor], out_hw: tuple[int, int], mode: str = "train") -> Tensor:
        h, w = out_hw
        ups = [f if f.shape[2:] == (h, w) else resize_bilinear(f, h, w) for f in feats]
        x = self.body(concat(ups, axis=1), mode)
        return clamp(sigmoid(self.out(x, mode)), PROB_EPS, 1 - PROB_EPS)


@dataclass
class ForwardResult:
    scores: Tensor
    latents: LatentStack
    pyramid: list


class DetectorNet(Module):
    """Full model: image (B,3,H,W) -> region/affinity scores (B,2,H/2,W/2)."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(rng, self.cfg)
        self.bifpn = [BiFPNLayer(rng, self.cfg) for _ in range(self.cfg.num_bifpn)] \
            if self.cfg.use_bifpn else []
        self.bottlenecks = [Bottleneck(rng, self.cfg) for _ in range(NUM_LEVELS)] \
            if self.cfg.use_bottleneck_kl else []
        self.head = Head(rng, self.cfg)

    def backbone_forward(self, image: Tensor, mode: str = "eval") -> list[Tensor]:
        return self.backbone(image, mode)

    def bifpn_forward(self, feats: list[Tensor], mode: str = "eval") -> list[Tensor]:
        for layer in self.bifpn:
            feats = layer(feats, mode)
        return feats

    def bottleneck_forward(self, feats: list[Tensor], mode: str = "eval",
                           rng: np.random.Generator | None = None):
        latents = LatentStack()
        if not self.bottlenecks:
            return latents, feats
        decoded = []
        for f, bn in zip(feats, self.bottlenecks):
            theta = bn.encode(f, mode)
            if mode == "train":
                if rng is None:
                    raise ValueError("train-mode sampling needs an rng")
                u = rng.uniform(PROB_EPS, 1 - PROB_EPS, size=theta.shape)
                z = relaxed_bernoulli_sample(theta, self.cfg.relax_temperature, u)
                latents.z_sample.append(z)
            else:
                z = theta
            latents.theta.append(theta)
            decoded.append(bn.decode(z, mode))
        return latents, decoded

    def head_forward(self, feats: list[Tensor], out_hw, mode: str = "eval") -> Tensor:
        return self.head(feats, out_hw, mode)

    def forward(self, image, mode: str = "eval", rng=None) -> ForwardResult:
        image = image if isinstance(image, Tensor) else Tensor(image)
        _, _, H, W = image.shape
        feats = self.backbone_forward(image, mode)
        feats = self.bifpn_forward(feats, mode)
        latents, decoded = self.bottleneck_forward(feats, mode, rng)
        scores = self.head_forward(decoded, (H // 2, W // 2), mode)
        return ForwardResult(scores=scores, latents=latents, pyramid=feats)

    __call__ = forward

    def fusion_coefficients(self) -> dict[str, np.ndarray]:
        coefs = {}
        for step, layer in enumerate(self.bifpn, start=1):
            for node, c in layer.coefficients().items():
                coefs[f"step{step}.{node}"] = c
        return coefs
