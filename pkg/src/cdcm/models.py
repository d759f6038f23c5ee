"""Network families producing latent embeddings or anomaly probabilities.

Two backbones are provided:

* a LeNet-type CNN for 32x32x3 inputs (three conv/pool stages, two dense
  layers), the family used on the modified CIFAR-10 benchmark;
* the SE-Dilated network for 256x256x3 slices: stacked SE-Dilated blocks with
  max pooling, a global-average-pooled tap after each block, DenseNet-style
  concatenation of all taps and an MLP head.

Neither uses batch normalisation, so a sample's output does not depend on the
other samples in its batch, and the last layer is a plain affine map whose
bias shifts every output by the same vector.

Modules take NCHW tensors like any torch module. :func:`forward` is the
inference entry point for NHWC image batches with values in [0, 1].
"""

import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError

# torchvision.models.resnet50(): 25,557,032 trainable parameters.
RESNET50_PARAMS = 25_557_032


class ModelFamily(str, Enum):
    LENET_TYPE = "lenet"
    CUSTOM_SE_DILATED = "custom"


class Head(str, Enum):
    METRIC = "metric"
    SIGMOID_CLASSIFIER = "classifier"


@dataclass(frozen=True)
class ModelConfig:
    family: ModelFamily = ModelFamily.LENET_TYPE
    input_shape: tuple = (32, 32, 3)
    latent_dim: int = 128
    head: Head = Head.METRIC
    kernel_size: int = 5
    leaky_relu_slope: float = 0.01
    dropout: float = 0.0
    dilation_rates: tuple = (1, 2, 4)
    se_reduction: int = 4
    block_widths: tuple = (32, 64, 128)
    dense_widths: tuple = (512,)
    fused_norm: bool = False  # per-sample standardization of the fused GAP vector (custom model only)

    def __post_init__(self):
        object.__setattr__(self, "family", ModelFamily(self.family))
        object.__setattr__(self, "head", Head(self.head))
        for name in ("input_shape", "dilation_rates", "block_widths", "dense_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.latent_dim <= 0:
            raise ConfigurationError("latent_dim must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must be in [0, 1)")
        if len(self.input_shape) != 3:
            raise ConfigurationError("input_shape must be (H, W, C)")

    @classmethod
    def lenet(cls, **overrides):
        """LeNet-type defaults: conv(32,64,128; 5x5) with pooling, dense 512 -> 128."""
        return replace(cls(), **overrides)

    @classmethod
    def custom(cls, **overrides):
        """SE-Dilated defaults: 4 blocks of widths (32,64,128,256), MLP 1440 -> 512 -> 256 -> 128."""
        base = cls(
            family=ModelFamily.CUSTOM_SE_DILATED,
            input_shape=(256, 256, 3),
            kernel_size=3,
            dropout=0.2,
            dilation_rates=(1, 2, 4),
            se_reduction=4,
            block_widths=(32, 64, 128, 256),
            dense_widths=(512, 256),
        )
        return replace(base, **overrides)

    def to_dict(self):
        d = asdict(self)
        d["family"] = self.family.value
        d["head"] = self.head.value
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _init_weights(module):
    # Xavier (Glorot) uniform kernels, zero biases.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Network(nn.Module):
    """Backbone + head. ``final_layer`` is the affine map producing the output."""

    config: ModelConfig

    @property
    def final_layer(self) -> nn.Linear:
        return self.classifier if self.config.head is Head.SIGMOID_CLASSIFIER else self.latent

    def _head(self, z):
        if self.config.head is Head.SIGMOID_CLASSIFIER:
            return torch.sigmoid(self.classifier(z))
        return z


class LeNetType(Network):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h, w, c = cfg.input_shape
        n_stages = len(cfg.block_widths)
        if h % (2**n_stages) or w % (2**n_stages):
            raise ConfigurationError(
                f"input {cfg.input_shape} is not divisible by 2^{n_stages} as required by the pooling stages"
            )
        self.config = cfg
        k = cfg.kernel_size
        layers = []
        cin = c
        for width in cfg.block_widths:
            layers += [
                nn.Conv2d(cin, width, k, padding=k // 2),
                nn.LeakyReLU(cfg.leaky_relu_slope),
                nn.MaxPool2d(2),
            ]
            cin = width
        self.features = nn.Sequential(*layers)
        flat = cin * (h // 2**n_stages) * (w // 2**n_stages)
        dense = []
        for width in cfg.dense_widths:
            dense += [nn.Linear(flat, width), nn.LeakyReLU(cfg.leaky_relu_slope)]
            if cfg.dropout:
                dense.append(nn.Dropout(cfg.dropout))
            flat = width
        self.dense = nn.Sequential(*dense)
        self.latent = nn.Linear(flat, cfg.latent_dim)
        if cfg.head is Head.SIGMOID_CLASSIFIER:
            self.classifier = nn.Linear(cfg.latent_dim, 1)
        _init_weights(self)

    def forward(self, x):
        z = self.features(x).flatten(1)
        return self._head(self.latent(self.dense(z)))


class SEBlock(nn.Module):
    """Squeeze-and-excitation: channel gates in (0, 1) from pooled descriptors."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        if reduction <= 0 or channels % reduction:
            raise ConfigurationError(f"{channels} channels are not divisible by SE reduction {reduction}")
        self.squeeze = nn.Linear(channels, channels // reduction)
        self.excite = nn.Linear(channels // reduction, channels)

    def gates(self, x):
        return torch.sigmoid(self.excite(F.relu(self.squeeze(x.mean(dim=(2, 3))))))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None]


def se_block(features, reduction=4, block=None):
    """Apply a (fresh, or given) SE block to an NCHW tensor."""
    if block is None:
        block = SEBlock(features.shape[1], reduction)
    return block(features)


class SEDilatedBlock(nn.Module):
    """Parallel dilated convolutions, channel-concatenated, then SE gating.

    Each branch keeps the spatial size (padding = rate * (k - 1) / 2).
    Output channels = ``len(rates) * width``.
    """

    def __init__(self, in_channels, width, rates=(1, 2, 4), kernel_size=3, reduction=4, slope=0.01):
        super().__init__()
        rates = tuple(int(r) for r in rates)
        if any(b <= a for a, b in zip(rates, rates[1:])) or rates[0] < 1:
            raise ConfigurationError(f"dilation rates must be positive and strictly increasing, got {rates}")
        if kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd to keep the spatial size")
        self.rates = rates
        self.slope = slope
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, width, kernel_size, padding=r * (kernel_size - 1) // 2, dilation=r) for r in rates
        )
        self.se = SEBlock(width * len(rates), reduction)

    @property
    def out_channels(self):
        return self.se.excite.out_features

    def forward(self, x):
        y = torch.cat([F.leaky_relu(b(x), self.slope) for b in self.branches], dim=1)
        return self.se(y)


def se_dilated_block(x, rates=(1, 2, 4), width=8, kernel_size=3, reduction=4):
    return SEDilatedBlock(x.shape[1], width, rates, kernel_size, reduction)(x)


class SEDilatedNet(Network):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h, w, c = cfg.input_shape
        n_blocks = len(cfg.block_widths)
        if h % (2**n_blocks) or w % (2**n_blocks):
            raise ConfigurationError(f"input {cfg.input_shape} is not divisible by 2^{n_blocks}")
        self.config = cfg
        blocks = []
        cin = c
        for width in cfg.block_widths:
            blk = SEDilatedBlock(
                cin, width, cfg.dilation_rates, cfg.kernel_size, cfg.se_reduction, cfg.leaky_relu_slope
            )
            blocks.append(blk)
            cin = blk.out_channels
        self.blocks = nn.ModuleList(blocks)
        self.fused_dim = sum(b.out_channels for b in self.blocks)
        mlp = []
        width_in = self.fused_dim
        for width in cfg.dense_widths:
            mlp += [nn.Linear(width_in, width), nn.LeakyReLU(cfg.leaky_relu_slope)]
            if cfg.dropout:
                mlp.append(nn.Dropout(cfg.dropout))
            width_in = width
        self.mlp = nn.Sequential(*mlp)
        self.latent = nn.Linear(width_in, cfg.latent_dim)
        if cfg.head is Head.SIGMOID_CLASSIFIER:
            self.classifier = nn.Linear(cfg.latent_dim, 1)
        _init_weights(self)

    def fused_features(self, x):
        taps = []
        for blk in self.blocks:
            x = blk(x)
            taps.append(x.mean(dim=(2, 3)))
            x = F.max_pool2d(x, 2)
        fused = torch.cat(taps, dim=1)
        if self.config.fused_norm:
            fused = F.layer_norm(fused, fused.shape[1:])
        return fused

    def forward(self, x):
        return self._head(self.latent(self.mlp(self.fused_features(x))))


def build_lenet_backbone(cfg: ModelConfig) -> LeNetType:
    if cfg.family is not ModelFamily.LENET_TYPE:
        raise ConfigurationError(f"expected a LeNet-type config, got {cfg.family.value}")
    if cfg.input_shape != (32, 32, 3):
        raise ConfigurationError(f"LeNet-type backbone expects input (32, 32, 3), got {cfg.input_shape}")
    return LeNetType(cfg)


def build_custom_model(cfg: ModelConfig) -> SEDilatedNet:
    if cfg.family is not ModelFamily.CUSTOM_SE_DILATED:
        raise ConfigurationError(f"expected an SE-Dilated config, got {cfg.family.value}")
    if cfg.input_shape != (256, 256, 3):
        raise ConfigurationError(f"SE-Dilated model expects input (256, 256, 3), got {cfg.input_shape}")
    return SEDilatedNet(cfg)


def build_model(cfg: ModelConfig, seed=None) -> Network:
    """Construct the network for ``cfg``; ``seed`` fixes the weight init."""
    if seed is not None:
        torch.manual_seed(seed)
    if cfg.family is ModelFamily.LENET_TYPE:
        return build_lenet_backbone(cfg)
    return build_custom_model(cfg)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def to_nchw(images, device="cpu"):
    """NHWC uint8 or float array/tensor -> float32 NCHW tensor in [0, 1]."""
    if isinstance(images, torch.Tensor):
        t = images
    else:
        t = torch.from_numpy(np.ascontiguousarray(images))
    if t.dtype == torch.uint8:
        t = t.float().div_(255.0)
    else:
        t = t.float()
    return t.permute(0, 3, 1, 2).contiguous().to(device)


def forward(net: Network, images, batch_size=256, device="cpu") -> np.ndarray:
    """Inference on an NHWC image batch; dropout disabled, no gradients.

    Returns (n, latent_dim) for a metric head or (n, 1) probabilities.
    """
    expected = tuple(net.config.input_shape)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ConfigurationError(f"images of shape {tuple(images.shape)} do not match input shape {expected}")
    was_training = net.training
    net.eval()
    outs = []
    try:
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                outs.append(net(to_nchw(images[start : start + batch_size], device)).cpu())
    finally:
        net.train(was_training)
    if not outs:
        width = net.config.latent_dim if net.config.head is Head.METRIC else 1
        return np.zeros((0, width), dtype=np.float32)
    return torch.cat(outs).numpy()


def shift_final_bias(net: Network, shift) -> Network:
    """Add ``shift`` to the bias of the final affine layer in place."""
    layer = net.final_layer
    s = torch.as_tensor(np.asarray(shift, dtype=np.float64), dtype=layer.bias.dtype)
    with torch.no_grad():
        layer.bias.add_(s.to(layer.bias.device))
    return net


def receptive_field(kernel_size, rate):
    """Side length of one dilated kernel's footprint: (k - 1) * r + 1."""
    return (kernel_size - 1) * rate + 1


def save_checkpoint(path, net: Network, step=0, best_val_aucroc=math.nan, extra=None):
    """Write config echo, named parameters, step counter and best val AUCROC."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "cdcm-checkpoint/1",
        "model_config": net.config.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
        "step": int(step),
        "best_val_aucroc": float(best_val_aucroc),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Rebuild the network stored at ``path``; returns ``(net, metadata)``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != "cdcm-checkpoint/1":
        raise ConfigurationError(f"{path} is not a checkpoint written by this package")
    cfg = ModelConfig.from_dict(payload["model_config"])
    net = build_model(cfg)
    net.load_state_dict(payload["state_dict"])
    meta = {k: payload[k] for k in ("step", "best_val_aucroc", "extra")}
    meta["model_config"] = cfg
    return net, meta
