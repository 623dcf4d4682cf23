"""Three-stage pyramid transformer encoder.

Each stage embeds patches with a non-overlapping strided conv (stride 4,
then 2, then 2), runs pre-norm transformer blocks whose attention reduces
keys/values spatially by ``sr_ratio``, and reshapes tokens back to a
feature map at strides 4 / 8 / 16. No positional encoding is added; token
position enters only through the strided patch embedding.
"""

from dataclasses import dataclass, field

from .errors import ShapeError
from .ops import (
    Conv2dParams,
    LayerNormParams,
    LinearParams,
    conv2d,
    gelu,
    init_conv2d,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    softmax_last,
)
from .serialize import load_params
from .tensor import Tensor, add, matmul, reshape, transpose


@dataclass
class StageConfig:
    embed_dim: int
    depth: int
    num_heads: int
    sr_ratio: int
    patch_stride: int
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.sr_ratio < 1:
            raise ShapeError(f"sr_ratio must be >= 1, got {self.sr_ratio}")


@dataclass
class AttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    proj: LinearParams
    sr: Conv2dParams | None = None  # present when sr_ratio > 1
    sr_norm: LayerNormParams | None = None


@dataclass
class BlockParams:
    norm1: LayerNormParams
    attn: AttentionParams
    norm2: LayerNormParams
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class StageParams:
    patch_proj: Conv2dParams
    patch_norm: LayerNormParams
    blocks: list = field(default_factory=list)


@dataclass
class EncoderParams:
    stages: list = field(default_factory=list)


@dataclass
class EncoderOutput:
    e1: Tensor  # [B, d1, H/4, W/4]
    e2: Tensor  # [B, d2, H/8, W/8]
    e3: Tensor  # [B, d3, H/16, W/16]

    def as_tuple(self):
        return self.e1, self.e2, self.e3


def init_encoder(rng, cfgs, in_channels: int = 3) -> EncoderParams:
    params = EncoderParams()
    c_in = in_channels
    for cfg in cfgs:
        d = cfg.embed_dim
        stage = StageParams(
            patch_proj=init_conv2d(rng, c_in, d, cfg.patch_stride, stride=cfg.patch_stride),
            patch_norm=init_layer_norm(d),
        )
        for _ in range(cfg.depth):
            attn = AttentionParams(
                q=init_linear(rng, d, d),
                k=init_linear(rng, d, d),
                v=init_linear(rng, d, d),
                proj=init_linear(rng, d, d),
            )
            if cfg.sr_ratio > 1:
                attn.sr = init_conv2d(rng, d, d, cfg.sr_ratio, stride=cfg.sr_ratio)
                attn.sr_norm = init_layer_norm(d)
            stage.blocks.append(
                BlockParams(
                    norm1=init_layer_norm(d),
                    attn=attn,
                    norm2=init_layer_norm(d),
                    fc1=init_linear(rng, d, d * cfg.mlp_ratio),
                    fc2=init_linear(rng, d * cfg.mlp_ratio, d),
                )
            )
        params.stages.append(stage)
        c_in = d
    return params


def patch_embed(x: Tensor, cfg: StageConfig, sp: StageParams):
    """Strided-conv embedding: [B,C,H,W] -> (tokens [B,N,D], h', w')."""
    b, _, h, w = x.shape
    stride = cfg.patch_stride
    if h % stride or w % stride:
        raise ShapeError(f"patch_embed: {h}x{w} not divisible by stride {stride}")
    fm = conv2d(x, sp.patch_proj)  # [B, D, h', w']
    h_out, w_out = fm.shape[2], fm.shape[3]
    tokens = transpose(reshape(fm, (b, cfg.embed_dim, h_out * w_out)), (0, 2, 1))
    tokens = layer_norm(tokens, sp.patch_norm.gamma, sp.patch_norm.beta, sp.patch_norm.eps)
    return tokens, h_out, w_out


def _tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    b, _, d = tokens.shape
    return transpose(reshape(tokens, (b, h, w, d)), (0, 3, 1, 2))


def sra_attention(tokens: Tensor, h: int, w: int, cfg: StageConfig, p: AttentionParams, return_attn: bool = False):
    """Multi-head attention whose keys/values see a spatially reduced grid.

    Queries come from all N = h*w tokens. For sr_ratio > 1 the key/value
    source is the token map downsampled by an sr-strided conv and
    layer-normed. Softmax scale is 1/sqrt(embed_dim / num_heads).
    """
    b, n, d = tokens.shape
    if n != h * w:
        raise ShapeError(f"sra_attention: {n} tokens but grid is {h}x{w}")
    heads = cfg.num_heads
    d_head = d // heads

    q = linear(tokens, p.q.weight, p.q.bias)
    if cfg.sr_ratio > 1:
        if h % cfg.sr_ratio or w % cfg.sr_ratio:
            raise ShapeError(f"sra_attention: grid {h}x{w} not divisible by sr_ratio {cfg.sr_ratio}")
        reduced = conv2d(_tokens_to_map(tokens, h, w), p.sr)
        n_kv = reduced.shape[2] * reduced.shape[3]
        kv_src = transpose(reshape(reduced, (b, d, n_kv)), (0, 2, 1))
        kv_src = layer_norm(kv_src, p.sr_norm.gamma, p.sr_norm.beta, p.sr_norm.eps)
    else:
        kv_src = tokens
        n_kv = n
    k = linear(kv_src, p.k.weight, p.k.bias)
    v = linear(kv_src, p.v.weight, p.v.bias)

    qh = transpose(reshape(q, (b, n, heads, d_head)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (b, n_kv, heads, d_head)), (0, 2, 1, 3))
    vh = transpose(reshape(v, (b, n_kv, heads, d_head)), (0, 2, 1, 3))

    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * float(d_head**-0.5)
    attn = softmax_last(scores)  # [B, heads, N, N_kv]
    ctx = matmul(attn, vh)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    out = linear(ctx, p.proj.weight, p.proj.bias)
    if return_attn:
        return out, attn
    return out


def transformer_block(tokens: Tensor, h: int, w: int, cfg: StageConfig, p: BlockParams) -> Tensor:
    """Pre-norm residual block: attention then a GELU MLP."""
    attended = sra_attention(layer_norm(tokens, p.norm1.gamma, p.norm1.beta, p.norm1.eps), h, w, cfg, p.attn)
    tokens = add(tokens, attended)
    hidden = gelu(linear(layer_norm(tokens, p.norm2.gamma, p.norm2.beta, p.norm2.eps), p.fc1.weight, p.fc1.bias))
    return add(tokens, linear(hidden, p.fc2.weight, p.fc2.bias))


def encoder_forward(x: Tensor, cfgs, params: EncoderParams) -> EncoderOutput:
    """Run all three stages; each stage's map feeds the next."""
    if x.ndim != 4:
        raise ShapeError(f"encoder expects [B,C,H,W], got shape {x.shape}")
    _, _, h, w = x.shape
    if h % 16 or w % 16:
        raise ShapeError(f"encoder input {h}x{w} must be divisible by 16")
    maps = []
    current = x
    for cfg, sp in zip(cfgs, params.stages):
        tokens, th, tw = patch_embed(current, cfg, sp)
        for block in sp.blocks:
            tokens = transformer_block(tokens, th, tw, cfg, block)
        current = _tokens_to_map(tokens, th, tw)
        maps.append(current)
    return EncoderOutput(*maps)


def load_pretrained(params: EncoderParams, path) -> EncoderParams:
    """Replace encoder weights from a checkpoint directory (shape-checked)."""
    load_params(params, path)
    return params
