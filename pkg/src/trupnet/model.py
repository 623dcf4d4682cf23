"""TransRUPNet: encoder features -> channel reduction -> up/decoder blocks
-> four-way concat -> residual head -> 1x1 conv -> sigmoid mask.

Wiring: the three encoder maps (strides 4/8/16) are each reduced to
``reduce_channels`` with 1x1 conv + BN + ReLU. Up blocks lift each reduced
map (and later the second decoder output) straight to the input
resolution via bilinear + residual block. Decoder blocks double the
spatial dims, concatenate the matching reduced skip, and apply a residual
block. The four up-block outputs concatenate to 4 * reduce_channels
channels before the head.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderParams, StageConfig, encoder_forward, init_encoder
from .errors import ContractError, FormatError, ShapeError
from .ops import (
    BatchNorm2dParams,
    Conv2dParams,
    batch_norm2d,
    bilinear_upsample,
    concat_channels,
    conv2d,
    init_batch_norm2d,
    init_conv2d,
    relu,
    sigmoid,
)
from .serialize import load_params, named_tensors, save_params
from .tensor import DTYPE, Tensor, add


def _default_stages():
    return (
        StageConfig(embed_dim=32, depth=2, num_heads=1, sr_ratio=8, patch_stride=4, mlp_ratio=4),
        StageConfig(embed_dim=64, depth=2, num_heads=2, sr_ratio=4, patch_stride=2, mlp_ratio=4),
        StageConfig(embed_dim=160, depth=2, num_heads=5, sr_ratio=2, patch_stride=2, mlp_ratio=4),
    )


@dataclass
class ModelConfig:
    input_size: tuple = (256, 256)
    reduce_channels: int = 64
    stages: tuple = field(default_factory=_default_stages)
    threshold: float = 0.5

    def __post_init__(self):
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ContractError(f"input size {h}x{w} must be divisible by 16")
        if self.reduce_channels < 1:
            raise ContractError("reduce_channels must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError("threshold must lie in (0, 1)")

    @classmethod
    def default(cls, input_size=(256, 256)) -> "ModelConfig":
        return cls(input_size=tuple(input_size))

    @classmethod
    def tiny(cls, input_size=(64, 64)) -> "ModelConfig":
        """Desk-scale variant: dims 16/32/64, depth 1, reduce 16."""
        stages = (
            StageConfig(embed_dim=16, depth=1, num_heads=1, sr_ratio=8, patch_stride=4, mlp_ratio=4),
            StageConfig(embed_dim=32, depth=1, num_heads=2, sr_ratio=4, patch_stride=2, mlp_ratio=4),
            StageConfig(embed_dim=64, depth=1, num_heads=4, sr_ratio=2, patch_stride=2, mlp_ratio=4),
        )
        return cls(input_size=tuple(input_size), reduce_channels=16, stages=stages)

    def to_text(self) -> str:
        lines = [
            f"input_h={self.input_size[0]}",
            f"input_w={self.input_size[1]}",
            f"reduce_channels={self.reduce_channels}",
            f"threshold={self.threshold}",
            f"n_stages={len(self.stages)}",
        ]
        for i, s in enumerate(self.stages):
            for key in ("embed_dim", "depth", "num_heads", "sr_ratio", "patch_stride", "mlp_ratio"):
                lines.append(f"stage{i}.{key}={getattr(s, key)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if not _:
                raise FormatError(f"bad config line: {line!r}")
            kv[key] = value
        try:
            n = int(kv["n_stages"])
            stages = tuple(
                StageConfig(
                    embed_dim=int(kv[f"stage{i}.embed_dim"]),
                    depth=int(kv[f"stage{i}.depth"]),
                    num_heads=int(kv[f"stage{i}.num_heads"]),
                    sr_ratio=int(kv[f"stage{i}.sr_ratio"]),
                    patch_stride=int(kv[f"stage{i}.patch_stride"]),
                    mlp_ratio=int(kv[f"stage{i}.mlp_ratio"]),
                )
                for i in range(n)
            )
            return cls(
                input_size=(int(kv["input_h"]), int(kv["input_w"])),
                reduce_channels=int(kv["reduce_channels"]),
                stages=stages,
                threshold=float(kv["threshold"]),
            )
        except KeyError as e:
            raise FormatError(f"config is missing key {e}") from e


@dataclass
class ResidualBlockParams:
    conv1: Conv2dParams
    bn1: BatchNorm2dParams
    conv2: Conv2dParams
    bn2: BatchNorm2dParams
    shortcut_conv: Conv2dParams | None = None  # present when C_in != C_out
    shortcut_bn: BatchNorm2dParams | None = None


@dataclass
class ReduceBlockParams:
    conv: Conv2dParams  # 1x1
    bn: BatchNorm2dParams


@dataclass
class TransRUPNetParams:
    encoder: EncoderParams
    reduces: list = field(default_factory=list)  # 3 blocks, one per encoder map
    ups: list = field(default_factory=list)  # 4 residual blocks at full resolution
    decoders: list = field(default_factory=list)  # 2 residual blocks (2R -> R)
    head_res: ResidualBlockParams = None
    head_conv: Conv2dParams = None  # 1x1, 4R -> 1


def init_residual_block(rng, c_in: int, c_out: int) -> ResidualBlockParams:
    p = ResidualBlockParams(
        conv1=init_conv2d(rng, c_in, c_out, 3, stride=1, padding=1),
        bn1=init_batch_norm2d(c_out),
        conv2=init_conv2d(rng, c_out, c_out, 3, stride=1, padding=1),
        bn2=init_batch_norm2d(c_out),
    )
    if c_in != c_out:
        p.shortcut_conv = init_conv2d(rng, c_in, c_out, 1)
        p.shortcut_bn = init_batch_norm2d(c_out)
    return p


def init_params(config: ModelConfig, seed: int = 0) -> TransRUPNetParams:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    r = config.reduce_channels
    params = TransRUPNetParams(encoder=init_encoder(rng, config.stages))
    for cfg in config.stages:
        params.reduces.append(
            ReduceBlockParams(conv=init_conv2d(rng, cfg.embed_dim, r, 1), bn=init_batch_norm2d(r))
        )
    for _ in range(4):
        params.ups.append(init_residual_block(rng, r, r))
    for _ in range(2):
        params.decoders.append(init_residual_block(rng, 2 * r, r))
    params.head_res = init_residual_block(rng, 4 * r, 4 * r)
    params.head_conv = init_conv2d(rng, 4 * r, 1, 1)
    return params


def residual_block(x: Tensor, p: ResidualBlockParams, mode: str) -> Tensor:
    """conv3x3-BN-ReLU-conv3x3-BN plus (projected) shortcut, ReLU after add."""
    main = batch_norm2d(conv2d(x, p.conv1), p.bn1, mode)
    main = batch_norm2d(conv2d(relu(main), p.conv2), p.bn2, mode)
    if p.shortcut_conv is not None:
        shortcut = batch_norm2d(conv2d(x, p.shortcut_conv), p.shortcut_bn, mode)
    else:
        shortcut = x
    return relu(add(main, shortcut))


def reduce_block(x: Tensor, p: ReduceBlockParams, mode: str) -> Tensor:
    """1x1 conv -> BN -> ReLU, squeezing channels to reduce_channels."""
    return relu(batch_norm2d(conv2d(x, p.conv), p.bn, mode))


def up_block(x: Tensor, target_hw, p: ResidualBlockParams, mode: str) -> Tensor:
    """Bilinear to the full input resolution, then a residual block."""
    return residual_block(bilinear_upsample(x, target_hw[0], target_hw[1]), p, mode)


def decoder_block(x: Tensor, skip: Tensor, p: ResidualBlockParams, mode: str) -> Tensor:
    """Double spatial dims, concat the skip, then a residual block.

    Concat order is (upsampled, skip); the skip must be exactly twice the
    input's spatial size.
    """
    _, _, h, w = x.shape
    if skip.shape[2] != 2 * h or skip.shape[3] != 2 * w:
        raise ShapeError(f"decoder_block: skip {skip.shape} is not twice input {x.shape}")
    up = bilinear_upsample(x, 2 * h, 2 * w)
    return residual_block(concat_channels([up, skip]), p, mode)


def forward(x: Tensor, config: ModelConfig, params: TransRUPNetParams, mode: str = "train", return_intermediate: bool = False):
    """Full forward pass: [B,3,H,W] -> sigmoid mask [B,1,H,W]."""
    _, _, h, w = x.shape
    full = (h, w)
    enc = encoder_forward(x, config.stages, params.encoder)
    r1 = reduce_block(enc.e1, params.reduces[0], mode)
    r2 = reduce_block(enc.e2, params.reduces[1], mode)
    r3 = reduce_block(enc.e3, params.reduces[2], mode)
    u1 = up_block(r1, full, params.ups[0], mode)
    u2 = up_block(r2, full, params.ups[1], mode)
    u3 = up_block(r3, full, params.ups[2], mode)
    d1 = decoder_block(r3, r2, params.decoders[0], mode)
    d2 = decoder_block(d1, r1, params.decoders[1], mode)
    u4 = up_block(d2, full, params.ups[3], mode)
    merged = concat_channels([u1, u2, u3, u4])
    y = sigmoid(conv2d(residual_block(merged, params.head_res, mode), params.head_conv))
    if return_intermediate:
        return y, {"concat": merged, "encoder": enc}
    return y


class TransRUPNet:
    """Config + parameters bundle with forward / predict / checkpoint I/O."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, params: TransRUPNetParams | None = None):
        self.config = config if config is not None else ModelConfig.default()
        self.params = params if params is not None else init_params(self.config, seed)

    def forward(self, x: Tensor, mode: str = "train", return_intermediate: bool = False):
        return forward(x, self.config, self.params, mode, return_intermediate)

    def predict_mask(self, x: Tensor, threshold: float | None = None) -> Tensor:
        """Eval-mode forward binarized at ``threshold`` (>= maps to 1)."""
        t = self.config.threshold if threshold is None else threshold
        if not 0.0 < t < 1.0:
            raise ContractError("threshold must lie in (0, 1)")
        y = self.forward(x, mode="eval")
        return Tensor((y.data >= DTYPE(t)).astype(DTYPE))

    def named_tensors(self):
        """All parameter state, running stats included."""
        return list(named_tensors(self.params))

    def named_parameters(self):
        """Trainable tensors only."""
        return [(name, t) for name, t in named_tensors(self.params) if t.requires_grad]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.txt").write_text(self.config.to_text())
        save_params(self.params, directory)

    @classmethod
    def load(cls, directory) -> "TransRUPNet":
        directory = Path(directory)
        config_path = directory / "config.txt"
        if not config_path.is_file():
            raise FormatError(f"{directory}: missing config.txt")
        config = ModelConfig.from_text(config_path.read_text())
        model = cls(config, seed=0)
        load_params(model.params, directory)
        return model
