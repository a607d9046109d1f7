"""Reward-feedback post-training.

The sampler runs without gradients to a late timestep, the clean image is
predicted in one gradient-tracked evaluation (x_hat = z_t + (1-t)*v), and
a differentiable toy reward on the decoded image is ascended through the
ReLU-truncated objective -max(0, r - b). Offsets b are calibrated per
reward as a percentile of the pre-training reward distribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evalkit, flowmatch, synthdata
from .codec import decode_to_raster
from .errors import ContractError, NumericError, ValidationError
from .pipeline import Pipeline, caption_ids, run_inference

_KERNEL_PALETTE = np.concatenate(
    [np.stack([synthdata.color_value(c) for c in synthdata.COLOR_NAMES]),
     np.stack([synthdata.color_value(c) for c in synthdata.BACKGROUND_NAMES])],
    axis=0,
)


@dataclass
class ReflConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 2e-5
    b_percentile: float = 70.0
    t_lo: float = 0.7
    t_hi: float = 0.95
    partial_steps: int = 8
    cfg_scale: float = 2.0
    calibration_samples: int = 512
    eval_every: int = 125
    guard_drop_points: float = 10.0
    lambda_outside: float = 1.0
    kernel_tau: float = 0.15
    alternate: bool = True  # alternate t2i / edit phases vs mixed batches
    weight_decay: float = 0.0
    grad_clip: float = 1.0

    def validate(self) -> None:
        if not (0.0 < self.t_lo <= self.t_hi <= 1.0):
            raise ValidationError("need 0 < t_lo <= t_hi <= 1")
        if self.partial_steps < 1 or self.batch_size < 1:
            raise ValidationError("partial_steps and batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Clean-image prediction
# ---------------------------------------------------------------------------


def predict_clean(pipe: Pipeline, samples: list[synthdata.TrainSample],
                  t: float, generator: torch.Generator,
                  cfg: ReflConfig, mechanism: str | None = None) -> torch.Tensor:
    """Denoise to time t without gradients, then one tracked evaluation.

    Returns the gradient-tracked clean latent prediction
    x_hat = z_t + (1 - t) * v(z_t, t, y) for the target panel.
    """
    if not (0.0 < t <= 1.0):
        raise ValidationError(f"t={t} outside (0, 1]")
    mechanism = mechanism or pipe.mechanism
    side = pipe.resolution
    b = len(samples)
    cond_embed = pipe.text(caption_ids(pipe.vocab, samples))
    null_embed = None
    if cfg.cfg_scale > 0:
        null_embed = pipe.text(torch.from_numpy(
            np.stack([pipe.vocab.null_tokens(s.task) for s in samples])))
    cond_latent = None
    if mechanism != "single":
        cond_latent = torch.stack([
            pipe.codec.encode(s.condition) if s.task == "edit"
            else pipe.codec.blank_latent(side)
            for s in samples
        ])
    latent_shape = (pipe.codec.channels, *pipe.codec.latent_hw(side))

    def velocity(x_t, t_now):
        x = x_t if mechanism == "single" else torch.cat([x_t, cond_latent], dim=-1)
        t_vec = torch.full((b,), float(t_now))
        v = pipe.denoiser(x, t_vec, cond_embed)
        if mechanism != "single":
            v = v[..., : x_t.shape[-1]]
        if cfg.cfg_scale > 0:
            v_null = pipe.denoiser(x, t_vec, null_embed)
            if mechanism != "single":
                v_null = v_null[..., : x_t.shape[-1]]
            v = v_null + cfg.cfg_scale * (v - v_null)
        return v

    with torch.no_grad():
        z = torch.randn((b, *latent_shape), generator=generator)
        grid = np.linspace(0.0, t, cfg.partial_steps + 1)
        for k in range(cfg.partial_steps):
            z = z + float(grid[k + 1] - grid[k]) * velocity(z, grid[k])
            if not torch.isfinite(z).all():
                raise NumericError(f"non-finite rollout state at step {k}")
    z_t = z.detach()
    x_hat = flowmatch.predict_clean_point(z_t, t, velocity(z_t, t))
    if not torch.isfinite(x_hat).all():
        raise NumericError("non-finite clean prediction")
    return x_hat


# ---------------------------------------------------------------------------
# Objective and toy rewards
# ---------------------------------------------------------------------------


def reward_loss(r: torch.Tensor, b: float) -> torch.Tensor:
    """-max(0, r - b), averaged; zero value and zero gradient where r <= b."""
    return -torch.relu(r - b).mean()


def _soft_histogram(image: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-palette-color soft occupancy, differentiable in the image.

    image: [., 3, H, W]; returns [., K] with K palette colors.
    """
    colors = torch.from_numpy(_KERNEL_PALETTE.astype(np.float32))  # [K, 3]
    flat = image.flatten(-2)  # [., 3, HW]
    d2 = ((flat.unsqueeze(-3) - colors[:, :, None]) ** 2).sum(-2)  # [., K, HW]
    return torch.exp(-d2 / (tau * tau)).mean(-1)


def toy_reward_t2i(sample: synthdata.TrainSample, image: torch.Tensor,
                   tau: float = 0.15) -> torch.Tensor:
    """Negative squared mismatch of soft palette histograms against the
    prompt's reference render. Maximal (zero) when the histograms agree."""
    ref = torch.from_numpy(sample.target).permute(2, 0, 1)
    with torch.no_grad():
        h_ref = _soft_histogram(ref, tau)
    h = _soft_histogram(image, tau)
    return -((h - h_ref) ** 2).sum(-1)


def toy_reward_edit(sample: synthdata.TrainSample, image: torch.Tensor,
                    lambda_outside: float = 1.0) -> torch.Tensor:
    """Negative masked MSE to the edit target inside the ground-truth mask,
    minus lambda times the MSE to the source outside it."""
    if sample.gt_mask is None:
        raise ContractError("edit reward requires a ground-truth mask")
    tgt = torch.from_numpy(sample.target).permute(2, 0, 1)
    src = torch.from_numpy(sample.condition).permute(2, 0, 1)
    m = torch.from_numpy(sample.gt_mask).to(image.dtype)[None]
    inside = (m * (image - tgt) ** 2).sum() / m.sum().clamp_min(1.0) / 3.0
    out_m = 1.0 - m
    outside = (out_m * (image - src) ** 2).sum() / out_m.sum().clamp_min(1.0) / 3.0
    return -(inside + lambda_outside * outside)


def batch_rewards(samples: list[synthdata.TrainSample], images: torch.Tensor,
                  cfg: ReflConfig) -> torch.Tensor:
    rs = []
    for s, img in zip(samples, images):
        if s.task == "generate":
            rs.append(toy_reward_t2i(s, img, cfg.kernel_tau))
        else:
            rs.append(toy_reward_edit(s, img, cfg.lambda_outside))
    return torch.stack(rs)


def _decode_differentiable(pipe: Pipeline, latents: torch.Tensor) -> torch.Tensor:
    """Latents -> images with gradients kept (no clamping)."""
    return pipe.codec.decode(latents)


# ---------------------------------------------------------------------------
# Calibration and the training loop
# ---------------------------------------------------------------------------


def calibrate_offset(pipe: Pipeline, samples: list[synthdata.TrainSample],
                     cfg: ReflConfig, seed: int = 0) -> float:
    """b = the configured percentile of the pre-training reward distribution."""
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    rewards: list[float] = []
    with torch.no_grad():
        for i in range(0, len(samples), cfg.batch_size):
            chunk = samples[i:i + cfg.batch_size]
            t = float(rng.uniform(cfg.t_lo, cfg.t_hi))
            x_hat = predict_clean(pipe, chunk, t, generator, cfg)
            imgs = _decode_differentiable(pipe, x_hat)
            rewards.extend(batch_rewards(chunk, imgs, cfg).tolist())
    return float(np.percentile(rewards, cfg.b_percentile))


def mean_reward(pipe: Pipeline, samples: list[synthdata.TrainSample],
                cfg: ReflConfig, seed: int = 0, steps: int = 24) -> float:
    """Held-out mean reward on full sampler outputs (no gradient)."""
    imgs = run_inference(pipe, samples, steps=steps, cfg_scale=cfg.cfg_scale,
                         seed=seed)
    t = torch.from_numpy(imgs).permute(0, 3, 1, 2)
    with torch.no_grad():
        return float(batch_rewards(samples, t, cfg).mean())


def _checker_pass_rate(pipe: Pipeline, gen_suite, edit_suite, seed: int = 0) -> float:
    rates = []
    if gen_suite:
        imgs = run_inference(pipe, gen_suite, steps=24, cfg_scale=2.0, seed=seed)
        res = [evalkit.check_generation(im, s) for im, s in zip(imgs, gen_suite)]
        rates.append(evalkit.aggregate_generation(res)["overall"])
    if edit_suite:
        imgs = run_inference(pipe, edit_suite, steps=24, cfg_scale=2.0, seed=seed)
        res = [evalkit.check_edit(im, s) for im, s in zip(imgs, edit_suite)]
        rates.append(evalkit.aggregate_editing(res)["overall"])
    return float(np.mean(rates)) if rates else 0.0


def refl_train(pipe: Pipeline, t2i_bank: list[synthdata.TrainSample],
               edit_bank: list[synthdata.TrainSample], cfg: ReflConfig,
               seed: int = 0, offsets: dict[str, float] | None = None,
               guard_suites: tuple[list, list] | None = None,
               out_dir: Path | None = None) -> dict:
    """Alternating reward ascent with a reward-hacking guard.

    Aborts and rolls back to the last snapshot if the checker pass rate on
    the guard suites drops more than the configured number of points.
    Returns metrics including the reward curve and calibrated offsets.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xEF1)))
    generator = torch.Generator().manual_seed(seed + 1)
    if offsets is None:
        offsets = {}
        cal = cfg.calibration_samples
        if t2i_bank:
            offsets["generate"] = calibrate_offset(pipe, t2i_bank[:cal], cfg, seed)
        if edit_bank:
            offsets["edit"] = calibrate_offset(pipe, edit_bank[:cal], cfg, seed)
    # the text encoder stays frozen during reward ascent
    params = [p for p in pipe.denoiser.parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve: list[tuple[int, str, float, float]] = []
    snapshot = {k: v.copy() for k, v in pipe.state_arrays().items()}
    guard_ref = None
    if guard_suites is not None:
        guard_ref = _checker_pass_rate(pipe, *guard_suites, seed=seed)
    metrics: dict = {"offsets": offsets, "aborted": False,
                     "guard_reference": guard_ref}

    for step in range(cfg.steps):
        if cfg.alternate:
            use_edit = (step % 2 == 1) and edit_bank
        else:
            use_edit = bool(edit_bank) and rng.random() < 0.5
        bank = edit_bank if use_edit else t2i_bank
        task = "edit" if use_edit else "generate"
        if not bank:
            continue
        idx = rng.integers(len(bank), size=cfg.batch_size)
        chunk = [bank[int(i)] for i in idx]
        t = float(rng.uniform(cfg.t_lo, cfg.t_hi))
        x_hat = predict_clean(pipe, chunk, t, generator, cfg)
        imgs = _decode_differentiable(pipe, x_hat)
        r = batch_rewards(chunk, imgs, cfg)
        loss = reward_loss(r, offsets[task])
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        curve.append((step, task, float(r.mean()), float(loss.detach())))

        if guard_suites is not None and (step + 1) % cfg.eval_every == 0:
            rate = _checker_pass_rate(pipe, *guard_suites, seed=seed)
            if (guard_ref - rate) * 100.0 > cfg.guard_drop_points:
                pipe.load_state_arrays(snapshot)
                metrics["aborted"] = True
                metrics["abort_step"] = step
                metrics["abort_rate"] = rate
                break
            snapshot = {k: v.copy() for k, v in pipe.state_arrays().items()}

    metrics["curve"] = [[s, task, round(r, 6), round(l, 6)]
                        for s, task, r, l in curve]
    if out_dir is not None:
        _write_curves(curve, Path(out_dir))
    return metrics


def _write_curves(curve, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "reward_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "task", "mean_reward", "loss"])
        w.writerows(curve)
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3.5))
        for task, color in (("generate", "tab:blue"), ("edit", "tab:orange")):
            pts = [(s, r) for s, tk, r, _ in curve if tk == task]
            if pts:
                ax.plot(*zip(*pts), label=task, color=color, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("mean reward")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "reward_curve.png", dpi=120)
        plt.close(fig)
    except Exception:
        pass  # plotting must never fail a training run
