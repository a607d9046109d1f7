"""Distribution-matching distillation into a 4-step, guidance-free student.

The generator gradient is the difference of real and fake scores evaluated
on the diffused student output; both scores come from velocity networks
through the linear-interpolant conversion centralized here, or from
closed-form Gaussian-mixture scores in the analytic validation mode. A
small logistic discriminator on noisy latents stabilizes image-mode
distillation.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import flowmatch, synthdata
from .errors import NumericError, ValidationError
from .pipeline import Pipeline, caption_ids

forward_diffuse = flowmatch.interpolate  # F(x, t) = t*x + (1-t)*eps


def score_from_velocity(x_t: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
    """Marginal score from a velocity estimate on the linear interpolant.

    With x_t = t*x + (1-t)*eps, the posterior noise estimate is
    eps_hat = x_t - t*v and the score is -eps_hat / (1 - t). Singular at
    t=1, so callers draw t away from the endpoints.
    """
    tb = t if not torch.is_tensor(t) else t.view(-1, *([1] * (x_t.ndim - 1)))
    return -(x_t - tb * v) / (1.0 - tb)


# ---------------------------------------------------------------------------
# Analytic mixtures (oracle mode)
# ---------------------------------------------------------------------------


@dataclass
class GaussianMixture2D:
    means: np.ndarray  # [K, 2]
    covs: np.ndarray  # [K, 2, 2]
    weights: np.ndarray  # [K]

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-9 or (self.weights <= 0).any():
            raise ValidationError("mixture weights must be positive and sum to 1")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.empty((n, 2))
        for k in range(len(self.weights)):
            idx = comp == k
            if idx.any():
                out[idx] = rng.multivariate_normal(self.means[k], self.covs[k],
                                                   size=int(idx.sum()))
        return out

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        mean = (self.weights[:, None] * self.means).sum(0)
        cov = np.zeros((2, 2))
        for k in range(len(self.weights)):
            d = (self.means[k] - mean)[:, None]
            cov += self.weights[k] * (self.covs[k] + d @ d.T)
        return mean, cov

    def score(self, x: torch.Tensor, t: float) -> torch.Tensor:
        """Closed-form score of the diffused mixture p_t at time t."""
        xs = x.detach().double()
        means = torch.from_numpy(self.means) * t
        eye = torch.eye(2, dtype=torch.float64)
        log_w = torch.log(torch.from_numpy(self.weights))
        log_probs, grads = [], []
        for k in range(len(self.weights)):
            cov = t * t * torch.from_numpy(self.covs[k]) + (1 - t) ** 2 * eye
            prec = torch.linalg.inv(cov)
            diff = xs - means[k]
            maha = (diff @ prec * diff).sum(-1)
            log_det = torch.logdet(cov)
            log_probs.append(log_w[k] - 0.5 * (maha + log_det))
            grads.append(-(diff @ prec))
        log_probs = torch.stack(log_probs, dim=-1)  # [N, K]
        resp = torch.softmax(log_probs, dim=-1)
        grads = torch.stack(grads, dim=-2)  # [N, K, 2]
        return (resp.unsqueeze(-1) * grads).sum(-2).to(x.dtype)


def gaussian_score(x: torch.Tensor, t: float, mean, var) -> torch.Tensor:
    """Score of a diffused isotropic Gaussian N(mean, var*I) at time t."""
    mean_t = torch.as_tensor(mean, dtype=x.dtype)
    var_t = t * t * float(var) + (1.0 - t) ** 2
    return -(x - t * mean_t) / var_t


# ---------------------------------------------------------------------------
# Generator gradient and fake-score updates
# ---------------------------------------------------------------------------


def dmd_generator_grad(g_out: torch.Tensor, t, eps: torch.Tensor,
                       real_score_fn, fake_score_fn,
                       normalize: bool = False) -> torch.Tensor:
    """Injected gradient dL/dG_out = t * (s_fake - s_real) at F(G_out, t).

    The descent direction (its negative) points from the fake mode toward
    the real mode. No gradients propagate into either score network;
    normalize rescales per sample by the mean absolute entry (stabilizer
    for image-scale runs).
    """
    with torch.no_grad():
        x_t = forward_diffuse(g_out.detach(), eps, t)
        s_real = real_score_fn(x_t, t)
        s_fake = fake_score_fn(x_t, t)
        tb = t if not torch.is_tensor(t) else t.view(-1, *([1] * (g_out.ndim - 1)))
        grad = tb * (s_fake - s_real)
        if not (torch.isfinite(s_real).all() and torch.isfinite(s_fake).all()):
            raise NumericError("non-finite score in distillation gradient")
        if normalize:
            dims = tuple(range(1, grad.ndim))
            scale = grad.abs().mean(dim=dims, keepdim=True).clamp_min(1e-8)
            grad = grad / scale
    return grad


def velocity_score_fn(model, cond_embed=None, cond_latent=None,
                      cfg_scale: float = 0.0, null_embed=None, paired: bool = True):
    """Wrap a velocity network as a score function on target-panel latents."""

    def fn(x_t: torch.Tensor, t) -> torch.Tensor:
        if paired and cond_latent is not None:
            x = torch.cat([x_t, cond_latent], dim=-1)
        else:
            x = x_t
        t_vec = (t if torch.is_tensor(t)
                 else torch.full((x.shape[0],), float(t)))
        v = model(x, t_vec, cond_embed)
        if paired and cond_latent is not None:
            v = v[..., : x_t.shape[-1]]
        if cfg_scale > 0:
            v_null = model(x, t_vec, null_embed)
            if paired and cond_latent is not None:
                v_null = v_null[..., : x_t.shape[-1]]
            v = v_null + cfg_scale * (v - v_null)
        return score_from_velocity(x_t, v, t)

    return fn


def update_fake_score(fake_model, opt: torch.optim.Optimizer,
                      student_samples: torch.Tensor, generator: torch.Generator,
                      cond_embed=None, cond_latent=None, paired: bool = True,
                      t_range: tuple[float, float] = (0.02, 0.98)) -> float:
    """One flow-matching step treating student outputs as data."""
    b = student_samples.shape[0]
    noise = torch.randn(student_samples.shape, generator=generator)
    t = torch.rand(b, generator=generator) * (t_range[1] - t_range[0]) + t_range[0]
    x_t = flowmatch.interpolate(student_samples, noise, t)
    v_target = flowmatch.velocity_target(student_samples, noise)
    if paired and cond_latent is not None:
        x = torch.cat([x_t, cond_latent], dim=-1)
    else:
        x = x_t
    v = fake_model(x, t, cond_embed) if cond_embed is not None else fake_model(x, t)
    if paired and cond_latent is not None:
        v = v[..., : x_t.shape[-1]]
    loss = flowmatch.flow_matching_loss(v, v_target)
    value = float(loss.detach())
    if not np.isfinite(value) or value > 1e3:
        raise NumericError(f"fake-score update diverged: loss={value:g}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return value


# ---------------------------------------------------------------------------
# GAN stabilizer
# ---------------------------------------------------------------------------


class LatentDiscriminator(nn.Module):
    """Small conv classifier on noisy latents, conditioned on t via an
    appended constant channel."""

    def __init__(self, channels: int, width: int = 48):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels + 1, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width * 2, width * 2, 1), nn.SiLU(),
        )
        self.head = nn.Linear(width * 2, 1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        tb = (t if torch.is_tensor(t) else torch.full((x.shape[0],), float(t)))
        tmap = tb.view(-1, 1, 1, 1).expand(-1, 1, *x.shape[-2:]).to(x.dtype)
        h = self.net(torch.cat([x, tmap], dim=1))
        return self.head(h.mean(dim=(-2, -1))).squeeze(-1)


def gan_loss(disc: LatentDiscriminator, real: torch.Tensor, fake: torch.Tensor,
             t) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating logistic objective on noisy latents.

    d_loss treats the fakes as constants; g_loss keeps the fake graph so
    generator gradients flow. At constant zero logits both equal ln 2.
    """
    d_real = disc(real, t)
    d_fake_detached = disc(fake.detach(), t)
    d_loss = 0.5 * (F.softplus(-d_real) + F.softplus(d_fake_detached)).mean()
    g_loss = F.softplus(-disc(fake, t)).mean()
    return d_loss, g_loss


# ---------------------------------------------------------------------------
# Few-step schedule and sampler
# ---------------------------------------------------------------------------


@dataclass
class FourStepSchedule:
    """Landing times of the student chain; evaluation happens at the
    previous landing time, with fresh noise re-injected between steps."""

    timesteps: tuple[float, float, float, float] = (0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        ts = self.timesteps
        if len(ts) != 4:
            raise ValidationError("schedule must have exactly 4 steps")
        if any(not (0.0 < t <= 1.0) for t in ts) or ts[-1] != 1.0:
            raise ValidationError("timesteps must lie in (0, 1] and end at 1")
        if any(ts[i] >= ts[i + 1] for i in range(3)):
            raise ValidationError("timesteps must be strictly increasing")


def four_step_schedule(shift: float = 1.0) -> FourStepSchedule:
    raw = np.linspace(0.25, 1.0, 4)
    return FourStepSchedule(tuple(float(flowmatch.time_shift(t, shift)) if t < 1.0
                                  else 1.0 for t in raw))


def few_step_sample(model, schedule: FourStepSchedule, spec: flowmatch.SamplerSpec,
                    cond_embed: torch.Tensor, latent_shape: tuple[int, ...],
                    generator: torch.Generator,
                    cond_latent: torch.Tensor | None = None,
                    batch: int = 1,
                    collect_inputs: list | None = None) -> torch.Tensor:
    """Student chain: predict clean, re-noise to the next landing time.

    collect_inputs, when given, receives (x_t, eval_time) pairs for each
    step so distillation can re-evaluate one step with gradients.
    """
    spec.validate()
    if cond_embed.ndim == 2:
        cond_embed = cond_embed[None].expand(batch, *cond_embed.shape)
    if cond_latent is not None and cond_latent.ndim == len(latent_shape):
        cond_latent = cond_latent[None].expand(batch, *cond_latent.shape).contiguous()
    x = torch.randn((batch, *latent_shape), generator=generator)
    eval_times = (0.0,) + schedule.timesteps[:-1]
    x_hat = x
    for i, (u, land) in enumerate(zip(eval_times, schedule.timesteps)):
        if collect_inputs is not None:
            collect_inputs.append((x.detach().clone(), u))
        if spec.mechanism == "in-context" and cond_latent is not None:
            inp = torch.cat([x, cond_latent], dim=-1)
        elif spec.mechanism == "pix2pix" and cond_latent is not None:
            inp = torch.cat([x, cond_latent], dim=-3)
        else:
            inp = x
        t_vec = torch.full((batch,), float(u))
        v = model(inp, t_vec, cond_embed)
        if spec.mechanism == "in-context" and cond_latent is not None:
            v = v[..., : x.shape[-1]]
        elif spec.mechanism == "pix2pix" and cond_latent is not None:
            v = v[..., : x.shape[-3], :, :]
        x_hat = flowmatch.predict_clean_point(x, u, v)
        if not torch.isfinite(x_hat).all():
            raise NumericError(f"non-finite student state at step {i}")
        if land < 1.0:
            eps = torch.randn(x_hat.shape, generator=generator)
            x = forward_diffuse(x_hat, land, eps)
    return x_hat


# ---------------------------------------------------------------------------
# Analytic 2D distillation (validation pipeline)
# ---------------------------------------------------------------------------


class PointGenerator(nn.Module):
    """One-step 2D student: noise in, sample out."""

    def __init__(self, width: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2, width), nn.SiLU(),
                                 nn.Linear(width, width), nn.SiLU(),
                                 nn.Linear(width, 2))

    def forward(self, eps: torch.Tensor) -> torch.Tensor:
        return self.net(eps) + eps  # residual keeps init spread out


class PointVelocity(nn.Module):
    """2D fake-score velocity net: v(x, t)."""

    def __init__(self, width: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(3, width), nn.SiLU(),
                                 nn.Linear(width, width), nn.SiLU(),
                                 nn.Linear(width, 2))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        tb = t if torch.is_tensor(t) else torch.full((x.shape[0],), float(t))
        return self.net(torch.cat([x, tb.view(-1, 1).to(x.dtype)], dim=-1))


@dataclass
class Mixture2DConfig:
    steps: int = 1500
    batch_size: int = 256
    g_lr: float = 2e-3
    fake_lr: float = 4e-3
    fake_steps_per_g: int = 5
    fake_warmup: int = 300
    t_min: float = 0.02
    t_max: float = 0.98
    seed: int = 0


def distill_mixture_2d(mixture: GaussianMixture2D,
                       cfg: Mixture2DConfig) -> tuple[PointGenerator, dict]:
    """DMD on a 2D mixture: closed-form real score, learned fake score."""
    torch.manual_seed(cfg.seed)
    gen = PointGenerator()
    fake = PointVelocity()
    g_opt = torch.optim.AdamW(gen.parameters(), lr=cfg.g_lr, weight_decay=0.0)
    f_opt = torch.optim.AdamW(fake.parameters(), lr=cfg.fake_lr, weight_decay=0.0)
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 2)

    def fake_score(x_t, t):
        return score_from_velocity(x_t, fake(x_t, torch.full((x_t.shape[0],), float(t))), t)

    # fake net warm start on the initial student distribution
    for _ in range(cfg.fake_warmup):
        with torch.no_grad():
            samples = gen(torch.randn(cfg.batch_size, 2, generator=generator))
        update_fake_score(fake, f_opt, samples, generator, paired=False,
                          t_range=(cfg.t_min, cfg.t_max))
    for step in range(cfg.steps):
        eps = torch.randn(cfg.batch_size, 2, generator=generator)
        x = gen(eps)
        t = float(rng.uniform(cfg.t_min, cfg.t_max))
        eps2 = torch.randn(cfg.batch_size, 2, generator=generator)
        grad = dmd_generator_grad(x, t, eps2, lambda xt, tt: mixture.score(xt, tt),
                                  fake_score)
        g_opt.zero_grad()
        x.backward(gradient=grad)
        g_opt.step()
        for _ in range(cfg.fake_steps_per_g):
            with torch.no_grad():
                samples = gen(torch.randn(cfg.batch_size, 2, generator=generator))
            update_fake_score(fake, f_opt, samples, generator, paired=False,
                              t_range=(cfg.t_min, cfg.t_max))
    with torch.no_grad():
        pts = gen(torch.randn(10_000, 2, generator=generator)).numpy()
    mean_t, cov_t = mixture.moments()
    metrics = {
        "student_mean": pts.mean(axis=0).tolist(),
        "student_cov": np.cov(pts.T).tolist(),
        "teacher_mean": mean_t.tolist(),
        "teacher_cov": cov_t.tolist(),
    }
    return gen, metrics


# ---------------------------------------------------------------------------
# Image-mode distillation
# ---------------------------------------------------------------------------


@dataclass
class DmdConfig:
    outer_steps: int = 300
    batch_size: int = 16
    g_lr: float = 2e-6
    fake_lr: float = 1e-5
    disc_lr: float = 1e-4
    fake_steps_per_g: int = 2
    dmd_weight: float = 1.0
    gan_weight: float = 0.05
    cfg_real: float = 2.0  # guidance applied to the frozen teacher score
    t_min: float = 0.02
    t_max: float = 0.98
    normalize_grad: bool = True
    eval_every: int = 100
    collapse_points: float = 20.0
    collapse_patience: int = 3
    edit_fraction: float = 0.5  # unified 1:1 mix reused for distillation


def state_hash(pipe: Pipeline) -> str:
    h = hashlib.sha256()
    for name in sorted(pipe.state_arrays()):
        h.update(name.encode())
        h.update(pipe.state_arrays()[name].tobytes())
    return h.hexdigest()


def distill(teacher: Pipeline, student: Pipeline,
            t2i_bank: list[synthdata.TrainSample],
            edit_bank: list[synthdata.TrainSample],
            cfg: DmdConfig, seed: int = 0,
            eval_fn=None) -> dict:
    """Alternating DMD + GAN distillation; mutates the student in place.

    The teacher provides the (guided) real score and stays frozen; a fake
    velocity net initialized from the teacher tracks the student's output
    distribution; eval_fn(student_pipe) -> pass rate drives the collapse
    guard when provided.
    """
    teacher_hash = state_hash(teacher)
    teacher.denoiser.eval()
    for p in teacher.denoiser.parameters():
        p.requires_grad_(False)
    fake_net = copy.deepcopy(student.denoiser)
    for p in fake_net.parameters():
        p.requires_grad_(True)
    disc = LatentDiscriminator(student.codec.channels)
    with torch.random.fork_rng():
        torch.manual_seed(seed + 7)
        for m in disc.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.normal_(m.weight, std=0.05)
                nn.init.zeros_(m.bias)
    g_opt = torch.optim.AdamW(student.denoiser.parameters(), lr=cfg.g_lr,
                              weight_decay=0.0)
    f_opt = torch.optim.AdamW(fake_net.parameters(), lr=cfg.fake_lr, weight_decay=0.0)
    d_opt = torch.optim.AdamW(disc.parameters(), lr=cfg.disc_lr, weight_decay=0.0)
    generator = torch.Generator().manual_seed(seed + 1)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD41D)))
    side = student.resolution
    latent_shape = (student.codec.channels, *student.codec.latent_hw(side))
    schedule = four_step_schedule()
    spec = flowmatch.SamplerSpec(steps=4, cfg_scale=0.0, mechanism="in-context",
                                 distilled=True)
    metrics: dict = {"teacher_hash": teacher_hash, "fake_losses": [],
                     "gan_losses": [], "evals": [], "aborted": False}
    teacher_rate = None
    if eval_fn is not None:
        teacher_rate = eval_fn(teacher)
        metrics["teacher_rate"] = teacher_rate
    below = 0

    def draw_batch():
        use_edit = rng.random(cfg.batch_size) < cfg.edit_fraction
        chunk = []
        for flag in use_edit:
            bank = edit_bank if (flag and edit_bank) else t2i_bank
            chunk.append(bank[int(rng.integers(len(bank)))])
        return chunk

    for step in range(cfg.outer_steps):
        chunk = draw_batch()
        cond_embed = student.text(caption_ids(student.vocab, chunk)).detach()
        null_embed = student.text(torch.from_numpy(
            np.stack([student.vocab.null_tokens(s.task) for s in chunk]))).detach()
        cond_latent = torch.stack([
            student.codec.encode(s.condition) if s.task == "edit"
            else student.codec.blank_latent(side)
            for s in chunk
        ])
        real_latent = torch.stack([student.codec.encode(s.target) for s in chunk])

        # student chain without gradients; re-run one step with gradients
        collected: list = []
        with torch.no_grad():
            few_step_sample(student.denoiser, schedule, spec, cond_embed,
                            latent_shape, generator, cond_latent=cond_latent,
                            batch=cfg.batch_size, collect_inputs=collected)
        k = int(rng.integers(4))
        x_in, u = collected[k]
        inp = torch.cat([x_in, cond_latent], dim=-1)
        t_vec = torch.full((cfg.batch_size,), float(u))
        v = student.denoiser(inp, t_vec, cond_embed)[..., : x_in.shape[-1]]
        x_hat = flowmatch.predict_clean_point(x_in, u, v)

        tau = float(rng.uniform(cfg.t_min, cfg.t_max))
        eps2 = torch.randn(x_hat.shape, generator=generator)
        real_fn = velocity_score_fn(teacher.denoiser, cond_embed, cond_latent,
                                    cfg_scale=cfg.cfg_real, null_embed=null_embed)
        fake_fn = velocity_score_fn(fake_net, cond_embed, cond_latent)
        grad = dmd_generator_grad(x_hat, tau, eps2, real_fn, fake_fn,
                                  normalize=cfg.normalize_grad)

        tau_g = float(rng.uniform(cfg.t_min, cfg.t_max))
        eps3 = torch.randn(x_hat.shape, generator=generator)
        real_noisy = forward_diffuse(real_latent, tau_g, eps3)
        eps4 = torch.randn(x_hat.shape, generator=generator)
        fake_noisy = forward_diffuse(x_hat, tau_g, eps4)
        d_loss, g_loss = gan_loss(disc, real_noisy, fake_noisy, tau_g)

        g_opt.zero_grad()
        x_hat.backward(gradient=cfg.dmd_weight * grad, retain_graph=True)
        (cfg.gan_weight * g_loss).backward()
        g_opt.step()

        d_opt.zero_grad()
        d_loss.backward()
        d_opt.step()
        metrics["gan_losses"].append([step, round(float(d_loss.detach()), 5),
                                      round(float(g_loss.detach()), 5)])

        for _ in range(cfg.fake_steps_per_g):
            with torch.no_grad():
                fresh: list = []
                samples = few_step_sample(student.denoiser, schedule, spec,
                                          cond_embed, latent_shape, generator,
                                          cond_latent=cond_latent,
                                          batch=cfg.batch_size,
                                          collect_inputs=fresh)
            fl = update_fake_score(fake_net, f_opt, samples, generator,
                                   cond_embed=cond_embed, cond_latent=cond_latent,
                                   t_range=(cfg.t_min, cfg.t_max))
        metrics["fake_losses"].append([step, round(fl, 5)])

        if eval_fn is not None and (step + 1) % cfg.eval_every == 0:
            rate = eval_fn(student)
            metrics["evals"].append([step, rate])
            if teacher_rate is not None and (teacher_rate - rate) * 100.0 > cfg.collapse_points:
                below += 1
                if below >= cfg.collapse_patience:
                    metrics["aborted"] = True
                    break
            else:
                below = 0

    student.distilled = True
    if state_hash(teacher) != teacher_hash:
        raise ValidationError("teacher parameters changed during distillation")
    return metrics
