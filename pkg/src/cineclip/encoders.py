"""Video and text encoders plus the linear projection heads into the joint space.

Parameter names are stable strings, consumed by the checkpoint format::

    video.patch.weight / video.patch.bias      cube embedding (3-D conv as a matmul)
    video.cls, video.pos                       class token, positional table
    video.s{i}.b{j}.<layer>                    stage i, block j
    video.norm.gamma / video.norm.beta         final layernorm
    video.proj.weight / video.proj.bias        projection head (the encoder's last linear layer)
    text.tok, text.pos, text.b{j}.<layer>, text.norm.*, text.proj.*

Inside a block: norm1.*, attn.qkv.*, attn.out.*, skip.weight (only when the
width changes), norm2.*, mlp.fc1.*, mlp.fc2.*.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, ParamSet, Tensor


@dataclass(frozen=True)
class StageConfig:
    width: int
    heads: int
    layers: int
    q_stride: tuple = (1, 1, 1)   # query pooling, first block of the stage only
    kv_stride: tuple = (1, 2, 2)  # key/value pooling, every block


def _desk_stages():
    return (
        StageConfig(32, 1, 2, (1, 1, 1), (1, 2, 2)),
        StageConfig(48, 2, 2, (1, 2, 2), (1, 2, 2)),
        StageConfig(64, 4, 2, (1, 2, 2), (1, 2, 2)),
    )


@dataclass(frozen=True)
class VideoConfig:
    in_channels: int = 1
    frames: int = 8
    height: int = 32
    width: int = 32
    cube: tuple = (2, 4, 4)
    stride: tuple = (2, 4, 4)
    stages: tuple = field(default_factory=_desk_stages)
    mlp_ratio: int = 2

    @property
    def grid(self):
        dims = (self.frames, self.height, self.width)
        return tuple((d - c) // s + 1 for d, c, s in zip(dims, self.cube, self.stride))

    @property
    def final_width(self):
        return self.stages[-1].width


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 64
    max_tokens: int = 48
    layers: int = 2
    heads: int = 2
    hidden: int = 32
    mlp_ratio: int = 2
    frozen_layers: int = 1   # lower layers held fixed during pretraining


@dataclass(frozen=True)
class EncoderConfig:
    video: VideoConfig = field(default_factory=VideoConfig)
    text: TextConfig = field(default_factory=TextConfig)
    joint_dim: int = 64

    def validate(self):
        v = self.video
        dims = (v.frames, v.height, v.width)
        for d, c, s in zip(dims, v.cube, v.stride):
            if c > d or s < 1 or c < 1:
                raise ContractError(f"cube {v.cube}/stride {v.stride} does not fit input {dims}")
        widths = [s.width for s in v.stages]
        if widths != sorted(widths):
            raise ContractError("stage widths must be non-decreasing")
        for s in v.stages:
            if s.width % s.heads:
                raise ContractError(f"width {s.width} not divisible by {s.heads} heads")
        if self.text.hidden % self.text.heads:
            raise ContractError("text hidden size not divisible by heads")
        if self.joint_dim < 1:
            raise ContractError("joint_dim must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        v = dict(d["video"])
        v["stages"] = tuple(StageConfig(**{k: tuple(x) if isinstance(x, list) else x for k, x in s.items()})
                            for s in v["stages"])
        for k in ("cube", "stride"):
            v[k] = tuple(v[k])
        return cls(VideoConfig(**v), TextConfig(**d["text"]), int(d["joint_dim"]))


DESK_PROFILE = EncoderConfig()

# Reference-scale values, documented only (never instantiated here): a 16-block
# MViT-B video encoder (blocks per stage 1/2/11/2, heads 1/2/4/8, widths
# 96/192/384/768, 36.3M parameters), a 12-layer 12-head text encoder (the hidden
# size is printed as 786, read as 768; ~110M parameters), 512-d joint space,
# 30522-token vocabulary, first 6 text layers frozen during pretraining.
PAPER_PROFILE = {
    "video_blocks_per_stage": (1, 2, 11, 2),
    "video_heads_per_stage": (1, 2, 4, 8),
    "video_widths": (96, 192, 384, 768),
    "video_input": (3, 16, 224, 224),
    "video_params": 36_300_000,
    "text_layers": 12,
    "text_heads": 12,
    "text_hidden": 768,
    "text_params": 110_000_000,
    "text_frozen_layers": 6,
    "vocab_size": 30522,
    "joint_dim": 512,
    "attention_maps": 65,
}


@dataclass
class TokenGrid:
    tokens: Tensor          # [B, 1 + T'H'W', d]; class token at index 0
    grid: tuple
    has_class_token: bool = True

    def __post_init__(self):
        n = int(np.prod(self.grid)) + (1 if self.has_class_token else 0)
        if self.tokens.shape[-2] != n:
            raise ContractError(f"{self.tokens.shape[-2]} tokens inconsistent with grid {self.grid}")


def token_count(dims, cube, stride):
    return int(np.prod([(d - c) // s + 1 for d, c, s in zip(dims, cube, stride)]))


# ------------------------------------------------------------------ init

def _dense(p, name, din, dout, rng, dtype, bias=True, trainable=True):
    p.add(name + ".weight", (rng.standard_normal((din, dout)) / math.sqrt(din)).astype(dtype), trainable)
    if bias:
        p.add(name + ".bias", np.zeros(dout, dtype=dtype), trainable)


def _norm(p, name, d, dtype):
    p.add(name + ".gamma", np.ones(d, dtype=dtype))
    p.add(name + ".beta", np.zeros(d, dtype=dtype))


def _block_params(p, pre, din, dout, mlp_ratio, rng, dtype):
    _norm(p, pre + "norm1", din, dtype)
    _dense(p, pre + "attn.qkv", din, 3 * dout, rng, dtype)
    _dense(p, pre + "attn.out", dout, dout, rng, dtype)
    if din != dout:
        _dense(p, pre + "skip", din, dout, rng, dtype, bias=False)
    _norm(p, pre + "norm2", dout, dtype)
    _dense(p, pre + "mlp.fc1", dout, mlp_ratio * dout, rng, dtype)
    _dense(p, pre + "mlp.fc2", mlp_ratio * dout, dout, rng, dtype)


def init_video_params(cfg, rng, dtype=np.float32, params=None):
    v = cfg.video
    p = ParamSet() if params is None else params
    k = v.in_channels * int(np.prod(v.cube))
    d0 = v.stages[0].width
    _dense(p, "video.patch", k, d0, rng, dtype)
    p.add("video.cls", (0.02 * rng.standard_normal(d0)).astype(dtype))
    p.add("video.pos", (0.02 * rng.standard_normal((int(np.prod(v.grid)), d0))).astype(dtype))
    din = d0
    for i, st in enumerate(v.stages):
        for j in range(st.layers):
            _block_params(p, f"video.s{i}.b{j}.", din, st.width, v.mlp_ratio, rng, dtype)
            din = st.width
    _norm(p, "video.norm", din, dtype)
    _dense(p, "video.proj", din, cfg.joint_dim, rng, dtype)
    return p


def init_text_params(cfg, rng, dtype=np.float32, params=None):
    t = cfg.text
    p = ParamSet() if params is None else params
    p.add("text.tok", (0.02 * rng.standard_normal((t.vocab_size, t.hidden))).astype(dtype))
    p.add("text.pos", (0.02 * rng.standard_normal((t.max_tokens, t.hidden))).astype(dtype))
    for j in range(t.layers):
        _block_params(p, f"text.b{j}.", t.hidden, t.hidden, t.mlp_ratio, rng, dtype)
    _norm(p, "text.norm", t.hidden, dtype)
    _dense(p, "text.proj", t.hidden, cfg.joint_dim, rng, dtype)
    return p


def init_encoder_params(cfg, seed, dtype=np.float32):
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = init_video_params(cfg, rng, dtype)
    return init_text_params(cfg, rng, dtype, params=p)


# --------------------------------------------------------------- pooling

_pool_cache = {}


def pool_grid(grid, stride):
    return tuple(-(-g // s) for g, s in zip(grid, stride))


def pool_matrix(grid, stride):
    """Average-pooling matrix [L_out, L_in] with window = stride; ragged edges average valid cells."""
    key = (tuple(grid), tuple(stride))
    if key not in _pool_cache:
        out = pool_grid(grid, stride)
        coords = np.stack(np.meshgrid(*[np.arange(g) for g in grid], indexing="ij"), -1).reshape(-1, 3)
        target = coords // np.asarray(stride)
        tidx = np.ravel_multi_index(target.T, out)
        m = np.zeros((int(np.prod(out)), int(np.prod(grid))))
        m[tidx, np.arange(coords.shape[0])] = 1.0
        m /= m.sum(axis=1, keepdims=True)
        _pool_cache[key] = (m, out)
    return _pool_cache[key]


def _pool(x, grid, stride):
    if all(s == 1 for s in stride):
        return x, grid
    m, out = pool_matrix(grid, stride)
    cls = x[:, :1]
    pooled = dc.matmul(Tensor(m.astype(x.dtype)), x[:, 1:])
    return dc.concat([cls, pooled], axis=1), out


# ------------------------------------------------------------- attention

def _split_heads(x, heads):
    B, N, d = x.shape
    return dc.transpose(dc.reshape(x, (B, N, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    B, H, N, dh = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (B, N, H * dh))


def _block(x, grid, p, pre, dout, heads, q_stride=(1, 1, 1), kv_stride=(1, 1, 1),
           key_mask=None, trace=None):
    din = x.shape[-1]
    h = dc.layernorm(x, p[pre + "norm1.gamma"], p[pre + "norm1.beta"])
    qkv = dc.linear(h, p[pre + "attn.qkv.weight"], p[pre + "attn.qkv.bias"])
    q, k, v = qkv[..., :dout], qkv[..., dout:2 * dout], qkv[..., 2 * dout:]
    qgrid = kgrid = grid
    if grid is not None:
        q, qgrid = _pool(q, grid, q_stride)
        k, kgrid = _pool(k, grid, kv_stride)
        v, _ = _pool(v, grid, kv_stride)
    q, k, v = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = dc.matmul(q, dc.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dout // heads))
    attn = dc.softmax(scores, axis=-1, mask=key_mask)
    if trace is not None:
        trace.append({"name": pre.rstrip("."), "attn": attn.data, "key_grid": kgrid, "query_grid": qgrid})
    o = dc.linear(_merge_heads(dc.matmul(attn, v)), p[pre + "attn.out.weight"], p[pre + "attn.out.bias"])
    skip = x if din == dout else dc.linear(x, p[pre + "skip.weight"])
    if grid is not None:
        skip, _ = _pool(skip, grid, q_stride)
    x = skip + o
    h2 = dc.layernorm(x, p[pre + "norm2.gamma"], p[pre + "norm2.beta"])
    m = dc.linear(dc.gelu(dc.linear(h2, p[pre + "mlp.fc1.weight"], p[pre + "mlp.fc1.bias"])),
                  p[pre + "mlp.fc2.weight"], p[pre + "mlp.fc2.bias"])
    return x + m, qgrid


# ----------------------------------------------------------------- video

def _as_batch(video, ndim):
    video = video if isinstance(video, Tensor) else Tensor(np.asarray(video))
    if video.ndim == ndim - 1:
        video = dc.reshape(video, (1,) + video.shape)
    return video


def cube_embed(video, params, cfg):
    """Split [B,C,T,H,W] (or [C,T,H,W]) into cube tokens plus a class token at index 0."""
    v = cfg.video
    x = _as_batch(video, 5)
    if x.shape[1:] != (v.in_channels, v.frames, v.height, v.width):
        raise ContractError(f"video shape {x.shape[1:]} does not match config "
                            f"{(v.in_channels, v.frames, v.height, v.width)}")
    tokens, grid = dc.conv3d_patches(x, params["video.patch.weight"], params["video.patch.bias"],
                                     v.cube, v.stride)
    tokens = tokens + params["video.pos"]
    B = x.shape[0]
    cls = dc.reshape(params["video.cls"], (1, 1, -1)) + Tensor(np.zeros((B, 1, 1), dtype=tokens.dtype))
    return TokenGrid(dc.concat([cls, tokens], axis=1), grid)


def pooled_attention_stage(tg, params, stage, index, trace=None):
    """Run every block of stage ``index``; the first block applies the query stride."""
    x, grid = tg.tokens, tg.grid
    for j in range(stage.layers):
        qs = stage.q_stride if j == 0 else (1, 1, 1)
        x, grid = _block(x, grid, params, f"video.s{index}.b{j}.", stage.width, stage.heads,
                         qs, stage.kv_stride, trace=trace)
    return TokenGrid(x, grid)


def encode_video(video, params, cfg, trace=None):
    """Class-token representation [B, final_width] after the last stage."""
    tg = cube_embed(video, params, cfg)
    for i, stage in enumerate(cfg.video.stages):
        tg = pooled_attention_stage(tg, params, stage, i, trace=trace)
    x = dc.layernorm(tg.tokens, params["video.norm.gamma"], params["video.norm.beta"])
    return x[:, 0]


# ------------------------------------------------------------------ text

CLS_ID = 1    # matches synthdata.Vocab


def encode_text(token_ids, params, cfg):
    """Class-position representation [B, hidden]; id 0 is padding and is masked out."""
    t = cfg.text
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.size and (ids.min() < 0 or ids.max() >= t.vocab_size):
        raise ContractError(f"token id outside vocabulary of size {t.vocab_size}")
    ids = ids[:, :t.max_tokens]
    if ids.shape[1] == 0:
        ids = np.full((ids.shape[0], 1), CLS_ID, dtype=np.int64)   # class token only
    B, L = ids.shape
    x = dc.take_rows(params["text.tok"], ids) + params["text.pos"][:L]
    mask = (ids != 0)[:, None, None, :]
    mask[..., 0] = True
    for j in range(t.layers):
        x, _ = _block(x, None, params, f"text.b{j}.", t.hidden, t.heads, key_mask=mask)
    x = dc.layernorm(x, params["text.norm.gamma"], params["text.norm.beta"])
    return x[:, 0]


# ------------------------------------------------------------ projection

class NormalizationError(ArithmeticError):
    pass


def l2_normalize(z, eps=1e-12):
    sq = dc.sum_(dc.square(z), axis=-1, keepdims=True)
    if np.any(sq.data <= eps):
        raise NormalizationError("projected embedding has zero norm")
    return z / dc.sqrt(sq)


def project(rep, params, which):
    """Linear head ``{which}.proj`` followed by L2 normalization."""
    rep = rep if isinstance(rep, Tensor) else Tensor(np.asarray(rep))
    w = params[f"{which}.proj.weight"]
    if rep.shape[-1] != w.shape[0]:
        raise ContractError(f"representation width {rep.shape[-1]} != head input {w.shape[0]}")
    return l2_normalize(dc.linear(rep, w, params[f"{which}.proj.bias"]))


# ------------------------------------------------------------------ freeze

FREEZE_MODES = ("finetune", "transfer", "frozen")
FINETUNE_TRAINABLE = ("video.proj.", "head.")


def freeze_plan(params, mode):
    """Set trainable flags: finetune -> projection head + downstream head; transfer -> all; frozen -> none."""
    if mode not in FREEZE_MODES:
        raise ContractError(f"unknown freeze mode {mode!r}")
    for name in params:
        if mode == "transfer":
            flag = True
        elif mode == "frozen":
            flag = False
        else:
            flag = name.startswith(FINETUNE_TRAINABLE)
        params.set_trainable(name, flag)
    return {name: params.is_trainable(name) for name in params}


def freeze_lower_text_layers(params, cfg):
    for name in params:
        for j in range(cfg.text.frozen_layers):
            if name.startswith(f"text.b{j}."):
                params.set_trainable(name, False)


def attention_map_count(cfg):
    """Per-layer-per-head maps plus one aggregate map."""
    return sum(s.layers * s.heads for s in cfg.video.stages) + 1
