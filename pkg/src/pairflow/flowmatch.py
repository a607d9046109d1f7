"""Flow-matching primitives, timestep samplers, losses, and the Euler sampler.

Convention: t runs from 0 (pure noise) to 1 (data). The interpolant is
x_t = t*x + (1-t)*eps and the regression target is the constant path
velocity v = x - eps, so x = x_t + (1-t)*v holds identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NumericError, ShapeError, ValidationError

# resolution -> time-shift factor used during training and sampling
DEFAULT_TIME_SHIFTS = {32: 1.0, 64: 1.5, 128: 2.0}


def _bcast_t(t, like: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=like.dtype)
    if t.ndim == 0:
        return t
    return t.view(-1, *([1] * (like.ndim - 1)))


def interpolate(clean: torch.Tensor, noise: torch.Tensor, t) -> torch.Tensor:
    """x_t = t*clean + (1-t)*noise (exact linear blend)."""
    if clean.shape != noise.shape:
        raise ShapeError(f"shape mismatch {tuple(clean.shape)} vs {tuple(noise.shape)}")
    tb = _bcast_t(t, clean)
    return tb * clean + (1.0 - tb) * noise


def velocity_target(clean: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Constant velocity of the straight path: clean - noise."""
    if clean.shape != noise.shape:
        raise ShapeError(f"shape mismatch {tuple(clean.shape)} vs {tuple(noise.shape)}")
    return clean - noise


def predict_clean_point(x_t: torch.Tensor, t, v: torch.Tensor) -> torch.Tensor:
    """Clean endpoint implied by a velocity estimate: x_t + (1-t)*v."""
    tb = _bcast_t(t, x_t)
    return x_t + (1.0 - tb) * v


def sample_timesteps(n: int, generator: torch.Generator,
                     loc: float = 0.0, scale: float = 1.0) -> torch.Tensor:
    """Logit-normal draw: sigmoid(loc + scale*n), strictly inside (0, 1)."""
    if scale <= 0:
        raise ValidationError(f"scale must be positive, got {scale}")
    z = torch.randn(n, generator=generator)
    t = torch.sigmoid(loc + scale * z)
    return t.clamp(1e-6, 1.0 - 1e-6)


def time_shift(t, s: float):
    """Resolution-dependent warp s*t / (1 + (s-1)*t); identity at s=1."""
    if s < 1.0:
        raise ValidationError(f"shift factor must be >= 1, got {s}")
    return (s * t) / (1.0 + (s - 1.0) * t)


def shift_for_resolution(side: int, table: dict[int, float] | None = None) -> float:
    table = table or DEFAULT_TIME_SHIFTS
    return table.get(side, 1.0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def flow_matching_loss(v_pred: torch.Tensor, v_target: torch.Tensor) -> torch.Tensor:
    """Mean squared velocity error over the supplied cells."""
    if v_pred.shape != v_target.shape:
        raise ShapeError(f"shape mismatch {tuple(v_pred.shape)} vs {tuple(v_target.shape)}")
    return ((v_pred - v_target) ** 2).mean()


def weighted_flow_matching_loss(v_pred: torch.Tensor, v_target: torch.Tensor,
                                weights: torch.Tensor,
                                literal_double_weight: bool = False) -> torch.Tensor:
    """Foreground-emphasis loss: mean of w * (v_pred - v_target)^2.

    weights broadcast over the channel axis and are required strictly
    positive with mean 1 (the mask pipeline normalizes them). The weight
    multiplies the squared residual once; literal_double_weight applies
    it inside the residual as well (ablation of the printed form).
    """
    if v_pred.shape != v_target.shape:
        raise ShapeError(f"shape mismatch {tuple(v_pred.shape)} vs {tuple(v_target.shape)}")
    if (weights <= 0).any():
        raise ValidationError("loss weights must be strictly positive")
    w = weights.to(v_pred.dtype)
    if literal_double_weight:
        return ((w * (v_pred - w * v_target)) ** 2).mean()
    return (w * (v_pred - v_target) ** 2).mean()


# ---------------------------------------------------------------------------
# State container (mainly for tests and probes)
# ---------------------------------------------------------------------------


@dataclass
class FlowState:
    clean: torch.Tensor
    noise: torch.Tensor
    t: float
    x_t: torch.Tensor
    v_target: torch.Tensor

    def check(self, tol: float = 1e-6) -> None:
        recon = predict_clean_point(self.x_t, self.t, self.v_target)
        err = (recon - self.clean).abs().max().item()
        if err > tol:
            raise NumericError(f"reconstruction identity violated: {err:.3e} > {tol}")


def make_flow_state(clean: torch.Tensor, noise: torch.Tensor, t: float) -> FlowState:
    if not (0.0 <= t <= 1.0):
        raise ValidationError(f"t={t} outside [0, 1]")
    return FlowState(clean, noise, t, interpolate(clean, noise, t),
                     velocity_target(clean, noise))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass
class SamplerSpec:
    """Sampling-run parameters. Distilled checkpoints force steps=4, cfg=0."""

    steps: int = 32
    cfg_scale: float = 0.0
    shift: float = 1.0
    task: str = "generate"
    mechanism: str = "in-context"  # "single" | "in-context" | "pix2pix"
    distilled: bool = False

    def validate(self) -> None:
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ValidationError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.shift < 1.0:
            raise ValidationError(f"shift must be >= 1, got {self.shift}")
        if self.mechanism not in ("single", "in-context", "pix2pix"):
            raise ValidationError(f"unknown mechanism {self.mechanism!r}")
        if self.distilled and (self.steps != 4 or self.cfg_scale != 0.0):
            raise ValidationError("distilled sampling requires steps=4 and cfg_scale=0")


def _model_input(target: torch.Tensor, cond_latent: torch.Tensor | None,
                 mechanism: str) -> torch.Tensor:
    if mechanism == "single":
        return target
    if cond_latent is None:
        raise ValidationError(f"mechanism {mechanism!r} needs a condition latent")
    if mechanism == "in-context":
        if cond_latent.shape != target.shape:
            raise ShapeError("condition panel shape must match target panel")
        return torch.cat([target, cond_latent], dim=-1)
    if cond_latent.shape[-2:] != target.shape[-2:]:
        raise ShapeError("pix2pix condition spatial dims must match target")
    return torch.cat([target, cond_latent], dim=-3)


def _target_slice(v_full: torch.Tensor, target: torch.Tensor, mechanism: str) -> torch.Tensor:
    if mechanism == "single":
        return v_full
    if mechanism == "in-context":
        return v_full[..., : target.shape[-1]]
    return v_full[..., : target.shape[-3], :, :]


def euler_sample(model, spec: SamplerSpec, cond_embed: torch.Tensor,
                 latent_shape: tuple[int, ...], generator: torch.Generator,
                 cond_latent: torch.Tensor | None = None,
                 null_embed: torch.Tensor | None = None,
                 batch: int = 1) -> torch.Tensor:
    """Integrate the learned flow from noise to data on a shifted-time grid.

    The condition panel is re-concatenated clean at every step; only the
    target panel is advanced. With cfg_scale > 0 the velocity is
    v_null + g*(v_cond - v_null); with cfg_scale == 0 the null branch is
    never evaluated.

    model: callable (x, t, cond) -> velocity of x's shape.
    Returns the final target-panel latent at t=1, shape [batch, *latent_shape].
    """
    spec.validate()
    if spec.cfg_scale > 0 and null_embed is None:
        raise ValidationError("cfg_scale > 0 requires a null embedding")
    target = torch.randn((batch, *latent_shape), generator=generator)
    if cond_latent is not None and cond_latent.ndim == len(latent_shape):
        cond_latent = cond_latent[None].expand(batch, *cond_latent.shape).contiguous()
    if cond_embed.ndim == 2:
        cond_embed = cond_embed[None].expand(batch, *cond_embed.shape)
    if null_embed is not None and null_embed.ndim == 2:
        null_embed = null_embed[None].expand(batch, *null_embed.shape)
    grid = time_shift(torch.linspace(0.0, 1.0, spec.steps + 1), spec.shift)
    for k in range(spec.steps):
        t_k = float(grid[k])
        dt = float(grid[k + 1] - grid[k])
        x = _model_input(target, cond_latent, spec.mechanism)
        t_vec = torch.full((batch,), t_k)
        v = _target_slice(model(x, t_vec, cond_embed), target, spec.mechanism)
        if spec.cfg_scale > 0:
            v_null = _target_slice(model(x, t_vec, null_embed), target, spec.mechanism)
            v = v_null + spec.cfg_scale * (v - v_null)
        target = target + dt * v
        if not torch.isfinite(target).all():
            raise NumericError(f"non-finite sampler state at step {k}")
    return target
