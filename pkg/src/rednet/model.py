"""The recursive encoder-decoder network.

Five dense blocks encode the input through four pooling stages; a mirrored
decoder upsamples with stride-2 transposed convolutions, concatenating the
same-resolution encoder output (skip link) before each of its last four
blocks. The produced edge map is fed back as an extra input channel and the
whole pass repeats over the shared parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .ops import BatchNormStats
from .tensor import Tensor

__all__ = [
    "DenseBlockConfig",
    "REDNetConfig",
    "default_config",
    "ModelParameters",
    "build_model",
    "dense_block_forward",
    "encoder_forward",
    "decoder_forward",
    "edge_iteration",
    "rednet_forward",
    "ForwardResult",
    "pad_to_grid",
    "crop_to",
    "parameter_count",
    "GRID_MULTIPLE",
]

# Default full-scale channel widths, layer counts and kernel sizes, block 1..5.
BASE_CHANNELS = (64, 64, 128, 256, 512)
BASE_LAYERS = (2, 2, 3, 3, 4)
BASE_KERNELS = (5, 5, 3, 3, 3)

# Stride-2 upsampling geometry; the 4x4 kernel admits an exact tent-filter init.
UP_KERNEL = 4
UP_STRIDE = 2
UP_PADDING = 1

# Four pooling stages -> spatial extents must divide 2**4.
GRID_MULTIPLE = 16


@dataclass(frozen=True)
class DenseBlockConfig:
    """One densely connected block: ``num_layers`` convs of ``channels`` each.

    Layer k consumes the concatenation of the block input and every earlier
    layer's output; the block output is the final layer's feature map.
    """

    num_layers: int
    kernel_size: int
    channels: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError(f"dense block needs at least one layer, got {self.num_layers}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"dense block kernel size must be odd and positive, got {self.kernel_size}")
        if self.channels < 1:
            raise ValueError(f"dense block channels must be positive, got {self.channels}")


@dataclass(frozen=True)
class REDNetConfig:
    """Full network shape: encoder/decoder blocks, recursion depth, input channels."""

    encoder: Tuple[DenseBlockConfig, ...]
    decoder: Tuple[DenseBlockConfig, ...]
    recursion: int = 2
    width_multiplier: float = 1.0
    in_channels: int = 4  # 3 image channels + 1 fed-back edge channel

    def __post_init__(self):
        if len(self.encoder) != 5 or len(self.decoder) != 5:
            raise ValueError(
                f"need exactly 5 encoder and 5 decoder blocks, got {len(self.encoder)}/{len(self.decoder)}"
            )
        for i, dec in enumerate(self.decoder):
            if dec != self.encoder[4 - i]:
                raise ValueError(
                    f"decoder block {i + 1} must mirror encoder block {5 - i}: {dec} vs {self.encoder[4 - i]}"
                )
        if self.recursion < 0:
            raise ValueError(f"recursion depth must be >= 0, got {self.recursion}")
        if self.in_channels < 2:
            raise ValueError("need at least one image channel plus the edge feedback channel")


def default_config(width_multiplier: float = 1.0, recursion: int = 2, in_channels: int = 4) -> REDNetConfig:
    """The standard block plan, with every channel width scaled by ``width_multiplier``."""
    if width_multiplier <= 0:
        raise ValueError("width multiplier must be positive")
    channels = [max(1, round(c * width_multiplier)) for c in BASE_CHANNELS]
    encoder = tuple(
        DenseBlockConfig(num_layers=l, kernel_size=k, channels=c)
        for l, k, c in zip(BASE_LAYERS, BASE_KERNELS, channels)
    )
    return REDNetConfig(
        encoder=encoder,
        decoder=encoder[::-1],
        recursion=recursion,
        width_multiplier=width_multiplier,
        in_channels=in_channels,
    )


def config_to_dict(config: REDNetConfig) -> dict:
    return {
        "encoder": [[b.num_layers, b.kernel_size, b.channels] for b in config.encoder],
        "decoder": [[b.num_layers, b.kernel_size, b.channels] for b in config.decoder],
        "recursion": config.recursion,
        "width_multiplier": config.width_multiplier,
        "in_channels": config.in_channels,
    }


def config_from_dict(d: dict) -> REDNetConfig:
    return REDNetConfig(
        encoder=tuple(DenseBlockConfig(*b) for b in d["encoder"]),
        decoder=tuple(DenseBlockConfig(*b) for b in d["decoder"]),
        recursion=int(d["recursion"]),
        width_multiplier=float(d["width_multiplier"]),
        in_channels=int(d["in_channels"]),
    )


def _dense_layer_inputs(block: DenseBlockConfig, in_channels: int) -> List[int]:
    """Input channel count of each layer under dense connectivity."""
    return [in_channels + k * block.channels for k in range(block.num_layers)]


class ModelParameters:
    """All learnable tensors of one network, keyed by layer path.

    The same parameters serve every recursion iteration; the feedback loop
    adds no entries, so the parameter count depends on the block plan only.
    Batch-norm running statistics live alongside but are not learnable.
    """

    def __init__(self, config: REDNetConfig, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.tensors: Dict[str, Tensor] = {}
        self.bn_stats: Dict[str, BatchNormStats] = {}
        self._build()

    def _new(self, path: str, shape: Tuple[int, ...]) -> None:
        if path in self.tensors:
            raise ValueError(f"duplicate parameter path {path!r}")
        self.tensors[path] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def _add_conv(self, path: str, cout: int, cin: int, k: int) -> None:
        self._new(f"{path}/w", (cout, cin, k, k))
        self._new(f"{path}/b", (cout,))

    def _add_bn(self, path: str, channels: int) -> None:
        self._new(f"{path}/gamma", (channels,))
        self._new(f"{path}/beta", (channels,))
        self.bn_stats[path] = BatchNormStats(channels, dtype=self.dtype)

    def _build(self) -> None:
        cfg = self.config
        c = cfg.in_channels
        for i, blk in enumerate(cfg.encoder, start=1):
            for k, cin in enumerate(_dense_layer_inputs(blk, c)):
                self._add_conv(f"enc{i}/l{k}/conv", blk.channels, cin, blk.kernel_size)
                self._add_bn(f"enc{i}/l{k}/bn", blk.channels)
            c = blk.channels
        prev = cfg.encoder[-1].channels
        for j, blk in enumerate(cfg.decoder, start=1):
            if j == 1:
                c_in = prev
            else:
                self._new(f"up{j}/w", (prev, blk.channels, UP_KERNEL, UP_KERNEL))
                c_in = blk.channels + cfg.encoder[5 - j].channels  # upsample + skip concat
            for k, cin in enumerate(_dense_layer_inputs(blk, c_in)):
                self._add_conv(f"dec{j}/l{k}/conv", blk.channels, cin, blk.kernel_size)
                self._add_bn(f"dec{j}/l{k}/bn", blk.channels)
            prev = blk.channels
        self._add_conv("head", 1, prev, 1)  # 1x1 prediction head, no batch norm

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self.tensors[path]
        except KeyError:
            raise KeyError(f"no parameter at path {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def items(self):
        return self.tensors.items()

    def paths(self) -> List[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count_learnable(self) -> int:
        return sum(t.size for t in self.tensors.values())


def build_model(config: REDNetConfig, seed: int, dtype=np.float64) -> ModelParameters:
    """Allocate and initialize all parameters; deterministic for a fixed seed."""
    params = ModelParameters(config, dtype=dtype)
    from .training import init_weights  # deferred: training depends on this module

    return init_weights(params, seed)


def parameter_count(params: ModelParameters) -> int:
    """Total learnable scalar count (running statistics excluded)."""
    return params.count_learnable()


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def dense_block_forward(
    x: Tensor, block: DenseBlockConfig, params: ModelParameters, prefix: str, mode: str
) -> Tensor:
    """Run one dense block; returns the final layer's feature map."""
    feats = x
    out = x
    pad = (block.kernel_size - 1) // 2
    for k in range(block.num_layers):
        y = ops.conv2d(
            feats, params[f"{prefix}/l{k}/conv/w"], params[f"{prefix}/l{k}/conv/b"], padding=pad
        )
        y = ops.batchnorm2d(
            y,
            params[f"{prefix}/l{k}/bn/gamma"],
            params[f"{prefix}/l{k}/bn/beta"],
            params.bn_stats[f"{prefix}/l{k}/bn"],
            mode,
        )
        y = ops.leaky_relu(y, 0.1)
        out = y
        if k + 1 < block.num_layers:
            feats = ops.concat_channels(feats, y)
    return out


def encoder_forward(x: Tensor, params: ModelParameters, mode: str) -> Tuple[Tensor, List[Tensor]]:
    """Encode to the 1/16-resolution bottleneck, keeping pre-pool skip features."""
    cfg = params.config
    if x.shape[1] != cfg.in_channels:
        raise ValueError(
            f"encoder expects {cfg.in_channels} input channels, got {x.shape[1]} (shape {tuple(x.shape)})"
        )
    h, w = x.shape[2], x.shape[3]
    if h % GRID_MULTIPLE or w % GRID_MULTIPLE:
        raise ValueError(
            f"encoder input {h}x{w} must be divisible by {GRID_MULTIPLE}; run pad_to_grid first"
        )
    skips: List[Tensor] = []
    feat = x
    for i, blk in enumerate(cfg.encoder, start=1):
        feat = dense_block_forward(feat, blk, params, f"enc{i}", mode)
        if i <= 4:
            skips.append(feat)
            feat = ops.maxpool2d(feat, 2, 2)
    return feat, skips


def decoder_forward(
    bottleneck: Tensor, skips: Sequence[Tensor], params: ModelParameters, mode: str
) -> Tensor:
    """Decode back to input resolution and emit a (0,1) edge map."""
    cfg = params.config
    if len(skips) != 4:
        raise ValueError(f"decoder expects 4 skip tensors, got {len(skips)}")
    feat = dense_block_forward(bottleneck, cfg.decoder[0], params, "dec1", mode)
    for j in range(2, 6):
        feat = ops.transposed_conv2d(feat, params[f"up{j}/w"], stride=UP_STRIDE, padding=UP_PADDING)
        skip = skips[5 - j]
        if feat.shape[2:] != skip.shape[2:]:
            raise ValueError(
                f"skip junction {j}: upsampled resolution {feat.shape[2:]} does not match "
                f"skip resolution {skip.shape[2:]}"
            )
        feat = ops.concat_channels(feat, skip)
        feat = dense_block_forward(feat, cfg.decoder[j - 1], params, f"dec{j}", mode)
    logits = ops.conv2d(feat, params["head/w"], params["head/b"], padding=0)
    return ops.sigmoid(logits)


def edge_iteration(image: Tensor, edge: Tensor, params: ModelParameters, mode: str) -> Tensor:
    """One full encoder-decoder pass on (image ++ edge feedback channel)."""
    inp = ops.concat_channels(image, edge)
    bottleneck, skips = encoder_forward(inp, params, mode)
    return decoder_forward(bottleneck, skips, params, mode)


@dataclass
class ForwardResult:
    """Edge maps of every iteration, first to last; each at input resolution."""

    edge_maps: List[Tensor] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.edge_maps[-1]


def rednet_forward(image, params: ModelParameters, recursion: int, mode: str = "infer") -> ForwardResult:
    """Run ``recursion + 1`` iterations with shared parameters.

    Iteration 0 concatenates an all-zero edge channel; every later iteration
    concatenates the previous iteration's edge map. In train mode the whole
    unrolled graph stays differentiable end to end.
    """
    if recursion < 0:
        raise ValueError(f"recursion depth must be >= 0, got {recursion}")
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image), dtype=params.dtype)
    elif image.data.dtype != params.dtype:
        image = Tensor(image.data, requires_grad=image.requires_grad, dtype=params.dtype)
    if image.ndim != 4:
        raise ValueError(f"rednet_forward expects (N, C, H, W) input, got {image.shape}")
    if image.shape[1] != params.config.in_channels - 1:
        raise ValueError(
            f"rednet_forward expects {params.config.in_channels - 1} image channels, got {image.shape[1]}"
        )
    n, _, h, w = image.shape
    edge = Tensor(np.zeros((n, 1, h, w), dtype=params.dtype))
    result = ForwardResult()
    for _ in range(recursion + 1):
        edge = edge_iteration(image, edge, params, mode)
        result.edge_maps.append(edge)
    return result


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _reflect_pad_tail(arr: np.ndarray, axis: int, amount: int) -> np.ndarray:
    """Reflect-pad one axis at its tail; falls back to edge replication for length-1 axes."""
    while amount > 0:
        n = arr.shape[axis]
        if n == 1:
            pad = [arr.take([0], axis=axis)] * amount
            return np.concatenate([arr] + pad, axis=axis)
        take = min(amount, n - 1)
        idx = np.arange(n - 2, n - 2 - take, -1)
        arr = np.concatenate([arr, arr.take(idx, axis=axis)], axis=axis)
        amount -= take
    return arr


def pad_to_grid(images: np.ndarray, multiple: int = GRID_MULTIPLE):
    """Reflect-pad right/bottom up to the next multiple; returns (padded, crop record).

    The crop record is the original (height, width); ``crop_to`` restores it
    exactly, so pad-then-crop is lossless.
    """
    if multiple < 1:
        raise ValueError("pad_to_grid multiple must be >= 1")
    images = np.asarray(images)
    h, w = images.shape[-2], images.shape[-1]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    out = images
    if pad_h:
        out = _reflect_pad_tail(out, out.ndim - 2, pad_h)
    if pad_w:
        out = _reflect_pad_tail(out, out.ndim - 1, pad_w)
    return out, (h, w)


def crop_to(arr: np.ndarray, record: Tuple[int, int]) -> np.ndarray:
    """Undo ``pad_to_grid`` using its crop record."""
    h, w = record
    return arr[..., :h, :w]
