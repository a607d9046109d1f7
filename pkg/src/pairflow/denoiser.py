"""Compact velocity-prediction UNet and its input builders.

Structural choices: expanded separable convolutions everywhere (no dense
conv with kernel > 1 over the full channel width), multi-query attention
with a single KV head, RMS-normalized queries/keys, feed-forward expansion
ratio 3, and no self-attention at the highest-resolution stage. The final
projection is zero-initialized so the untrained model predicts zero
velocity.

Input modes: a single latent (plain text-to-image), a two-panel latent
(target | condition concatenated along width), or channel concatenation
(the InstructPix2Pix-style baseline, which widens the stem to 2C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError, ValidationError


@dataclass
class DenoiserConfig:
    in_channels: int = 48
    stage_channels: tuple[int, ...] = (64, 128, 192)
    transformer_blocks_per_stage: tuple[int, ...] = (0, 1, 2)
    conv_blocks_per_stage: int = 2
    conv_expansion: int = 2
    ffn_ratio: int = 3
    q_heads: int = 4
    kv_heads: int = 1
    high_res_self_attention: bool = False
    d_text: int = 128
    time_width: int = 128
    pix2pix: bool = False

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.transformer_blocks_per_stage = tuple(self.transformer_blocks_per_stage)
        if self.kv_heads != 1:
            raise ConfigError("multi-query attention requires exactly one KV head")
        if self.ffn_ratio != 3:
            raise ConfigError("feed-forward expansion ratio is fixed at 3")
        if len(self.stage_channels) != len(self.transformer_blocks_per_stage):
            raise ConfigError("stage list lengths differ")
        if not self.high_res_self_attention and self.transformer_blocks_per_stage[0] != 0:
            raise ConfigError(
                "first stage must have 0 transformer blocks when "
                "high-resolution self-attention is off"
            )
        for c in self.stage_channels:
            if c % self.q_heads or c % 8:
                raise ConfigError(f"stage width {c} must be divisible by q_heads and 8")

    @property
    def input_channels(self) -> int:
        return self.in_channels * (2 if self.pix2pix else 1)


# ---------------------------------------------------------------------------
# Input builders
# ---------------------------------------------------------------------------


def build_incontext_input(z_target: torch.Tensor, z_condition: torch.Tensor) -> torch.Tensor:
    """Two-panel latent: [target | condition] along width. Condition is clean."""
    if z_target.shape != z_condition.shape:
        raise ShapeError(
            f"panel shapes differ: {tuple(z_target.shape)} vs {tuple(z_condition.shape)}"
        )
    return torch.cat([z_target, z_condition], dim=-1)


def split_pair(pair: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    w = pair.shape[-1]
    if w % 2:
        raise ShapeError(f"paired latent width {w} is odd")
    return pair[..., : w // 2], pair[..., w // 2:]


def build_pix2pix_input(z_noisy: torch.Tensor, z_condition: torch.Tensor) -> torch.Tensor:
    """Channel concatenation [z_noisy; z_condition]; spatial size unchanged."""
    if z_noisy.shape[-2:] != z_condition.shape[-2:]:
        raise ShapeError(
            f"spatial dims differ: {tuple(z_noisy.shape)} vs {tuple(z_condition.shape)}"
        )
    return torch.cat([z_noisy, z_condition], dim=-3)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class TimeEmbedding(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(),
                                 nn.Linear(width, width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.width // 2
        freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / half)
        ang = t[:, None] * freqs[None, :] * 1000.0
        return self.mlp(torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1))


class RMSNorm(nn.Module):
    """Root-mean-square normalization with a learned gain (for Q/K)."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * scale * self.gain


class SeparableResBlock(nn.Module):
    """Inverted-residual block: pointwise expand, depthwise 3x3, pointwise
    project, with FiLM time modulation after the norm."""

    def __init__(self, channels: int, time_width: int, expansion: int):
        super().__init__()
        hidden = channels * expansion
        self.norm = nn.GroupNorm(8, channels)
        self.time_proj = nn.Linear(time_width, 2 * channels)
        self.expand = nn.Conv2d(channels, hidden, 1)
        self.depthwise = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.project = nn.Conv2d(hidden, channels, 1)
        # residual branches start silent so the stack behaves like identity
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.time_proj(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm(x) * (1 + scale) + shift
        h = F.silu(self.expand(h))
        h = F.silu(self.depthwise(h))
        return x + self.project(h)


def _mqa_attention(q, k, v, heads: int):
    # q: [B, N, C] -> [B, heads, N, hd]; k, v: [B, M, hd] -> [B, 1, M, hd]
    b, n, c = q.shape
    hd = c // heads
    q = q.view(b, n, heads, hd).transpose(1, 2)
    k = k[:, None]
    v = v[:, None]
    logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
    out = logits.softmax(dim=-1) @ v
    return out.transpose(1, 2).reshape(b, n, c)


class TransformerBlock(nn.Module):
    """Self-attention (MQA), cross-attention over the caption embedding, and
    a ratio-3 feed-forward, all pre-norm residual."""

    def __init__(self, channels: int, d_text: int, q_heads: int, ffn_ratio: int):
        super().__init__()
        hd = channels // q_heads
        self.q_heads = q_heads
        self.head_dim = hd
        self.norm_self = nn.LayerNorm(channels)
        self.q_self = nn.Linear(channels, channels)
        self.k_self = nn.Linear(channels, hd)
        self.v_self = nn.Linear(channels, hd)
        self.qnorm_self = RMSNorm(hd)
        self.knorm_self = RMSNorm(hd)
        self.out_self = nn.Linear(channels, channels)

        self.norm_cross = nn.LayerNorm(channels)
        self.q_cross = nn.Linear(channels, channels)
        self.k_cross = nn.Linear(d_text, hd)
        self.v_cross = nn.Linear(d_text, hd)
        self.qnorm_cross = RMSNorm(hd)
        self.knorm_cross = RMSNorm(hd)
        self.out_cross = nn.Linear(channels, channels)

        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(nn.Linear(channels, channels * ffn_ratio), nn.GELU(),
                                 nn.Linear(channels * ffn_ratio, channels))
        for proj in (self.out_self, self.out_cross, self.ffn[-1]):
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)

    def _qk(self, q, norm_q, k, norm_k):
        b, n, c = q.shape
        q = norm_q(q.view(b, n, self.q_heads, self.head_dim)).view(b, n, c)
        return q, norm_k(k)

    def forward(self, tokens: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.norm_self(tokens)
        q, k = self._qk(self.q_self(h), self.qnorm_self, self.k_self(h), self.knorm_self)
        tokens = tokens + self.out_self(_mqa_attention(q, k, self.v_self(h), self.q_heads))

        h = self.norm_cross(tokens)
        q, k = self._qk(self.q_cross(h), self.qnorm_cross,
                        self.k_cross(cond), self.knorm_cross)
        tokens = tokens + self.out_cross(_mqa_attention(q, k, self.v_cross(cond), self.q_heads))

        return tokens + self.ffn(self.norm_ffn(tokens))


class Downsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.depthwise = nn.Conv2d(c_in, c_in, 3, stride=2, padding=1, groups=c_in)
        self.pointwise = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class Upsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.depthwise = nn.Conv2d(c_in, c_in, 3, padding=1, groups=c_in)
        self.pointwise = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.pointwise(self.depthwise(x))


def sincos_position_2d(channels: int, h: int, w: int) -> torch.Tensor:
    """Fixed 2D sine-cosine positional features, shape [1, channels, h, w]."""
    if channels % 4:
        raise ConfigError(f"positional features need channels % 4 == 0, got {channels}")
    quarter = channels // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float32) / quarter)
    ys = torch.arange(h, dtype=torch.float32)[:, None] * freqs[None, :]
    xs = torch.arange(w, dtype=torch.float32)[:, None] * freqs[None, :]
    pe = torch.cat([
        torch.sin(ys)[:, None, :].expand(h, w, quarter),
        torch.cos(ys)[:, None, :].expand(h, w, quarter),
        torch.sin(xs)[None, :, :].expand(h, w, quarter),
        torch.cos(xs)[None, :, :].expand(h, w, quarter),
    ], dim=-1)
    return pe.permute(2, 0, 1)[None]


# ---------------------------------------------------------------------------
# The UNet
# ---------------------------------------------------------------------------


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        ch = config.stage_channels
        n_stage = len(ch)
        self.time = TimeEmbedding(config.time_width)
        self.stem = nn.Conv2d(config.input_channels, ch[0], 1)

        def make_stage(c, n_trans):
            convs = nn.ModuleList(
                SeparableResBlock(c, config.time_width, config.conv_expansion)
                for _ in range(config.conv_blocks_per_stage)
            )
            trans = nn.ModuleList(
                TransformerBlock(c, config.d_text, config.q_heads, config.ffn_ratio)
                for _ in range(n_trans)
            )
            return nn.ModuleDict({"convs": convs, "trans": trans})

        self.enc = nn.ModuleList(
            make_stage(ch[s], config.transformer_blocks_per_stage[s])
            for s in range(n_stage)
        )
        self.downs = nn.ModuleList(
            Downsample(ch[s], ch[s + 1]) for s in range(n_stage - 1)
        )
        self.ups = nn.ModuleList(
            Upsample(ch[s + 1], ch[s]) for s in range(n_stage - 1)
        )
        self.fuse = nn.ModuleList(
            nn.Conv2d(2 * ch[s], ch[s], 1) for s in range(n_stage - 1)
        )
        self.dec = nn.ModuleList(
            make_stage(ch[s], config.transformer_blocks_per_stage[s])
            for s in range(n_stage - 1)
        )
        self.head_norm = nn.GroupNorm(8, ch[0])
        self.head = nn.Conv2d(ch[0], config.input_channels, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self._pos_cache: dict[tuple[int, int, int], torch.Tensor] = {}

    def _position(self, c: int, h: int, w: int) -> torch.Tensor:
        key = (c, h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_position_2d(c, h, w)
        return self._pos_cache[key]

    def _run_stage(self, stage: nn.ModuleDict, x: torch.Tensor,
                   temb: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        for block in stage["convs"]:
            x = block(x, temb)
        if len(stage["trans"]) > 0:
            b, c, h, w = x.shape
            tokens = (x + self._position(c, h, w).to(x.dtype)).flatten(2).transpose(1, 2)
            for block in stage["trans"]:
                tokens = block(tokens, cond)
            x = tokens.transpose(1, 2).view(b, c, h, w)
        return x

    @staticmethod
    def _check(name: str, x: torch.Tensor) -> None:
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations after {name}")

    def forward(self, x: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeError(f"expected [B, C, H, W] input, got {tuple(x.shape)}")
        if x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"input has {x.shape[1]} channels, config expects "
                f"{self.config.input_channels}"
            )
        stride = 2 ** (len(self.config.stage_channels) - 1)
        if x.shape[-2] % stride or x.shape[-1] % stride:
            raise ShapeError(f"spatial dims must be divisible by {stride}")
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), float(t), dtype=x.dtype)
        if t.ndim == 0:
            t = t.expand(x.shape[0]).clone()
        if ((t < 0) | (t > 1)).any():
            raise ValidationError("t outside [0, 1]")
        if cond.ndim == 2:
            cond = cond[None].expand(x.shape[0], *cond.shape)

        temb = self.time(t.to(x.dtype))
        h = self.stem(x)
        self._check("stem", h)
        skips = []
        for s, stage in enumerate(self.enc):
            h = self._run_stage(stage, h, temb, cond)
            self._check(f"encoder stage {s}", h)
            if s < len(self.downs):
                skips.append(h)
                h = self.downs[s](h)
        for s in reversed(range(len(self.dec))):
            h = self.ups[s](h)
            h = self.fuse[s](torch.cat([h, skips.pop()], dim=1))
            h = self._run_stage(self.dec[s], h, temb, cond)
            self._check(f"decoder stage {s}", h)
        out = self.head(F.silu(self.head_norm(h)))
        self._check("head", out)
        return out


# ---------------------------------------------------------------------------
# Structure audits and checkpoint surgery
# ---------------------------------------------------------------------------


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def audit_mqa(model: Denoiser) -> None:
    """Key/value projections must be exactly one head wide."""
    for name, module in model.named_modules():
        if isinstance(module, TransformerBlock):
            for proj in ("k_self", "v_self", "k_cross", "v_cross"):
                rows = getattr(module, proj).weight.shape[0]
                if rows != module.head_dim:
                    raise ValidationError(
                        f"{name}.{proj} is {rows} wide, expected single head "
                        f"width {module.head_dim}"
                    )


def audit_separable(model: nn.Module) -> None:
    """No dense conv with kernel > 1 over the full channel width."""
    for name, module in model.named_modules():
        if isinstance(module, nn.Conv2d) and module.kernel_size != (1, 1):
            if module.groups != module.in_channels:
                raise ValidationError(
                    f"{name} is a dense {module.kernel_size} conv over "
                    f"{module.in_channels} channels"
                )


def widen_for_pix2pix(state_dict: dict, config: DenoiserConfig) -> dict:
    """Adapt a single-panel checkpoint to the channel-concat baseline.

    The stem gains zero-initialized weights for the condition channels and
    the head gains zero-initialized output rows, so the widened model
    initially reproduces the source model on the target channels and
    predicts zero velocity for the condition channels.
    """
    if not config.pix2pix:
        raise ConfigError("target config must have pix2pix=True")
    c = config.in_channels
    out = dict(state_dict)
    stem_w = state_dict["stem.weight"]
    if stem_w.shape[1] == 2 * c:
        return out  # already widened
    if stem_w.shape[1] != c:
        raise ShapeError(f"unexpected stem width {stem_w.shape[1]}")
    out["stem.weight"] = torch.cat([stem_w, torch.zeros_like(stem_w)], dim=1)
    head_w, head_b = state_dict["head.weight"], state_dict["head.bias"]
    out["head.weight"] = torch.cat([head_w, torch.zeros_like(head_w)], dim=0)
    out["head.bias"] = torch.cat([head_b, torch.zeros_like(head_b)], dim=0)
    return out
