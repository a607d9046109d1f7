"""Curriculum orchestration: staged training, checkpoints, run manifests.

Stage order follows the task-progressive recipe (t2i -> edit -> unified),
with ablation recipes covering direct joint training, in-context t2i
continuation, and the channel-concat baseline. Each stage re-seeds its
data and noise streams from (run seed, stage index), creates a fresh
optimizer, and ends with a checkpoint, so resuming at a stage boundary
reproduces the original run exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import flowmatch, maskpipe, synthdata
from .denoiser import widen_for_pix2pix
from .errors import (CheckpointError, ConfigError, NumericError,
                     ValidationError)
from .pipeline import Pipeline

STAGE_NAMES = ("t2i", "edit", "unified", "sft")
MECHANISMS = ("single", "in-context", "pix2pix")
LOSS_MODES = ("fm", "fmw-for-edit")

# staged learning-rate schedule; sft reuses the lowest rate
DEFAULT_STAGE_LR = {"t2i": 1e-4, "edit": 1e-5, "unified": 1e-6, "sft": 1e-6}

RECIPES = ("tpj", "direct-unified", "t2i-only", "edit-only",
           "t2i-t2i-incontext", "pix2pix-edit", "pix2pix-tpj")

DIVERGENCE_LIMIT = 1e3


@dataclass
class StageConfig:
    name: str
    steps: int = 1000
    batch_size: int = 32
    lr: float | None = None  # None -> stage default
    resolution: int = 64
    t2i_fraction: float = 1.0
    edit_fraction: float = 0.0
    mechanism: str = "in-context"
    loss: str = "fmw-for-edit"
    cfg_drop: float = 0.1
    logit_loc: float = 0.0
    logit_scale: float = 1.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    log_every: int = 100
    ema_decay: float = 0.0  # 0 disables the weight average
    literal_double_weight: bool = False
    supervise_condition_panel: bool = False

    def __post_init__(self):
        if self.lr is None:
            self.lr = DEFAULT_STAGE_LR.get(self.name, 1e-4)
        self.validate()

    def validate(self) -> None:
        if self.name not in STAGE_NAMES:
            raise ConfigError(f"unknown stage name {self.name!r}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not (0 <= self.t2i_fraction <= 1 and 0 <= self.edit_fraction <= 1):
            raise ConfigError("data-mix fractions must lie in [0, 1]")
        if abs(self.t2i_fraction + self.edit_fraction - 1.0) > 1e-9:
            raise ConfigError("data-mix fractions must sum to 1")
        if self.name == "t2i" and self.edit_fraction != 0.0:
            raise ConfigError("t2i stages must have edit fraction 0")
        if self.name == "edit" and self.t2i_fraction != 0.0:
            raise ConfigError("edit stages must have t2i fraction 0")
        if self.name in ("unified", "sft") and abs(self.edit_fraction - 0.5) > 0.05:
            raise ConfigError("unified stages use an approximately 1:1 mix")


def _stage(name: str, resolution: int, mechanism: str, **kw) -> StageConfig:
    mix = {
        "t2i": dict(t2i_fraction=1.0, edit_fraction=0.0),
        "edit": dict(t2i_fraction=0.0, edit_fraction=1.0),
        "unified": dict(t2i_fraction=0.5, edit_fraction=0.5),
        "sft": dict(t2i_fraction=0.5, edit_fraction=0.5),
    }[name]
    return StageConfig(name=name, resolution=resolution, mechanism=mechanism,
                       **mix, **kw)


def make_curriculum(recipe: str, resolution: int = 64,
                    overrides: dict[str, dict] | None = None,
                    progressive_t2i: bool = False) -> list[StageConfig]:
    """Deterministic stage list for one training recipe.

    overrides maps stage keys ("t2i", "edit", "unified", and "t2i.1" for
    a second t2i stage) to StageConfig field dicts. progressive_t2i splits
    the leading t2i stage into a half-resolution warmup followed by the
    full-resolution stage (the resolution curriculum).
    """
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r} (choose from {RECIPES})")
    r = resolution
    plans = {
        "tpj": [("t2i", "single"), ("edit", "in-context"), ("unified", "in-context")],
        "direct-unified": [("t2i", "single"), ("unified", "in-context")],
        "t2i-only": [("t2i", "single")],
        "edit-only": [("t2i", "single"), ("edit", "in-context")],
        "t2i-t2i-incontext": [("t2i", "single"), ("t2i", "in-context")],
        "pix2pix-edit": [("t2i", "single"), ("edit", "pix2pix")],
        "pix2pix-tpj": [("t2i", "single"), ("edit", "pix2pix"), ("unified", "pix2pix")],
    }
    plan = list(plans[recipe])
    resolutions = [r] * len(plan)
    if progressive_t2i and r > 32:
        plan.insert(0, ("t2i", "single"))
        resolutions = [r // 2] + resolutions
    stages = []
    seen: dict[str, int] = {}
    overrides = overrides or {}
    for (name, mechanism), res in zip(plan, resolutions):
        n = seen.get(name, 0)
        seen[name] = n + 1
        key = name if n == 0 else f"{name}.{n}"
        kw = dict(overrides.get(name, {}))
        kw.update(overrides.get(key, {}))
        kw.setdefault("mechanism", mechanism)
        kw.setdefault("resolution", res)
        stages.append(_stage(name, kw.pop("resolution"), **kw))
    return stages


# ---------------------------------------------------------------------------
# Encoded corpus cache
# ---------------------------------------------------------------------------


class EncodedCorpus:
    """Latents, token ids, and loss weight maps for a materialized corpus.

    Edit samples whose derived mask is degenerate (empty after filtering)
    are skipped and counted, per the scope rule.
    """

    def __init__(self, corpus: synthdata.Corpus, pipe: Pipeline,
                 mask_params: maskpipe.MaskParams | None = None):
        self.side = corpus.side
        self.mask_params = mask_params or maskpipe.MaskParams(factor=pipe.codec.factor)
        vocab = pipe.vocab
        codec = pipe.codec
        self.skipped_degenerate = 0

        t2i_targets, t2i_tokens = [], []
        for s in corpus.t2i:
            t2i_targets.append(codec.encode(s.target))
            t2i_tokens.append(vocab.tokenize(s.task, s.caption))
        self.t2i_targets = torch.stack(t2i_targets) if t2i_targets else None
        self.t2i_tokens = (torch.from_numpy(np.stack(t2i_tokens))
                           if t2i_tokens else None)

        edit_targets, edit_conds, edit_tokens, edit_weights = [], [], [], []
        h = w = self.side // codec.factor
        for s in corpus.edit:
            try:
                _, wmap = maskpipe.derive(s.condition, s.target, s.scope, self.mask_params)
            except maskpipe.DegenerateMaskError:
                self.skipped_degenerate += 1
                continue
            edit_targets.append(codec.encode(s.target))
            edit_conds.append(codec.encode(s.condition))
            edit_tokens.append(vocab.tokenize(s.task, s.caption))
            edit_weights.append(torch.from_numpy(wmap.astype(np.float32)).view(1, h, w))
        self.edit_targets = torch.stack(edit_targets) if edit_targets else None
        self.edit_conds = torch.stack(edit_conds) if edit_conds else None
        self.edit_tokens = (torch.from_numpy(np.stack(edit_tokens))
                            if edit_tokens else None)
        self.edit_weights = torch.stack(edit_weights) if edit_weights else None

    @property
    def n_t2i(self) -> int:
        return 0 if self.t2i_targets is None else self.t2i_targets.shape[0]

    @property
    def n_edit(self) -> int:
        return 0 if self.edit_targets is None else self.edit_targets.shape[0]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _draw_batch(ec: EncodedCorpus, cfg: StageConfig, pipe: Pipeline,
                rng: np.random.Generator):
    """Assemble (targets, condition latents, token ids, weights) per the mix."""
    b = cfg.batch_size
    is_edit = rng.random(b) < cfg.edit_fraction
    if ec.n_edit == 0:
        is_edit[:] = False
    if ec.n_t2i == 0:
        is_edit[:] = True
    h = w = ec.side // pipe.codec.factor
    blank = pipe.codec.blank_latent(ec.side)

    targets, conds, tokens, weights = [], [], [], []
    for i in range(b):
        if is_edit[i]:
            j = int(rng.integers(ec.n_edit))
            targets.append(ec.edit_targets[j])
            conds.append(ec.edit_conds[j])
            tokens.append(ec.edit_tokens[j])
            weights.append(ec.edit_weights[j] if cfg.loss == "fmw-for-edit"
                           else torch.ones(1, h, w))
        else:
            j = int(rng.integers(ec.n_t2i))
            targets.append(ec.t2i_targets[j])
            conds.append(blank)
            tokens.append(ec.t2i_tokens[j])
            weights.append(torch.ones(1, h, w))
    tokens = torch.stack(tokens)
    if cfg.cfg_drop > 0:
        drop = rng.random(b) < cfg.cfg_drop
        for i in np.nonzero(drop)[0]:
            task = "edit" if is_edit[i] else "generate"
            tokens[i] = torch.from_numpy(pipe.vocab.null_tokens(task))
    return (torch.stack(targets), torch.stack(conds), tokens,
            torch.stack(weights), is_edit)


def training_step_loss(pipe: Pipeline, cfg: StageConfig, batch, tgen: torch.Generator,
                       shift: float) -> torch.Tensor:
    """One forward pass and loss under the stage's input mechanism.

    The condition panel is never noised; in in-context mode the loss covers
    the target panel only (unless the ablation flag supervises both),
    which makes the condition-panel gradient exactly zero.
    """
    targets, conds, tokens, weights, _ = batch
    b = targets.shape[0]
    noise = torch.randn(targets.shape, generator=tgen)
    t = flowmatch.sample_timesteps(b, tgen, cfg.logit_loc, cfg.logit_scale)
    t = flowmatch.time_shift(t, shift)
    z_t = flowmatch.interpolate(targets, noise, t)
    v_target = flowmatch.velocity_target(targets, noise)
    cond_embed = pipe.text(tokens)

    if cfg.mechanism == "single":
        v_pred = pipe.denoiser(z_t, t, cond_embed)
        return flowmatch.weighted_flow_matching_loss(
            v_pred, v_target, weights, cfg.literal_double_weight)
    if cfg.mechanism == "in-context":
        x = torch.cat([z_t, conds], dim=-1)
        v_full = pipe.denoiser(x, t, cond_embed)
        v_pred = v_full[..., : z_t.shape[-1]]
        loss = flowmatch.weighted_flow_matching_loss(
            v_pred, v_target, weights, cfg.literal_double_weight)
        if cfg.supervise_condition_panel:
            v_cond = v_full[..., z_t.shape[-1]:]
            loss = loss + (v_cond ** 2).mean()
        return loss
    # pix2pix: loss over all cells; condition channels target zero velocity
    x = torch.cat([z_t, conds], dim=-3)
    v_full = pipe.denoiser(x, t, cond_embed)
    c = z_t.shape[-3]
    v_target_full = torch.cat([v_target, torch.zeros_like(conds)], dim=-3)
    w_full = torch.cat([weights.expand(-1, c, -1, -1),
                        torch.ones(b, c, *weights.shape[-2:])], dim=-3)
    return flowmatch.weighted_flow_matching_loss(
        v_full, v_target_full, w_full, cfg.literal_double_weight)


def stage_seeds(run_seed: int, stage_index: int) -> tuple[int, int]:
    ss = np.random.SeedSequence((run_seed, stage_index))
    a, b = ss.generate_state(2)
    return int(a), int(b)


def run_stage(pipe: Pipeline, cfg: StageConfig, corpus: EncodedCorpus,
              run_seed: int, stage_index: int = 0) -> dict:
    """Execute one curriculum stage; mutates the pipeline parameters.

    Returns metrics: the logged loss curve, final/initial losses, and the
    degenerate-mask skip count from corpus preparation.
    """
    cfg.validate()
    metrics: dict = {"name": cfg.name, "steps": cfg.steps,
                     "skipped_degenerate": corpus.skipped_degenerate,
                     "loss_curve": []}
    if cfg.steps == 0:
        return metrics
    np_seed, torch_seed = stage_seeds(run_seed, stage_index)
    rng = np.random.default_rng(np_seed)
    tgen = torch.Generator().manual_seed(torch_seed)
    shift = flowmatch.shift_for_resolution(cfg.resolution, pipe.shift_table)
    params = list(pipe.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=(0.9, 0.999),
                            weight_decay=cfg.weight_decay)
    ema = None
    if cfg.ema_decay > 0:
        ema = [p.detach().clone() for p in params]
    for step in range(cfg.steps):
        batch = _draw_batch(corpus, cfg, pipe, rng)
        loss = training_step_loss(pipe, cfg, batch, tgen, shift)
        value = float(loss.detach())
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise NumericError(
                f"divergence in stage {cfg.name!r} at step {step}: loss={value:g}"
            )
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for shadow, p in zip(ema, params):
                    shadow.mul_(cfg.ema_decay).add_(p.detach(), alpha=1 - cfg.ema_decay)
        if step == 0:
            metrics["initial_loss"] = value
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            metrics["loss_curve"].append([step, round(value, 6)])
    if ema is not None:
        # the averaged weights become the stage's result
        with torch.no_grad():
            for shadow, p in zip(ema, params):
                p.copy_(shadow)
    metrics["final_loss"] = value
    pipe.mechanism = cfg.mechanism
    return metrics


def curate_corpus(corpus: synthdata.Corpus, fraction: float = 0.1) -> synthdata.Corpus:
    """High-quality subset for supervised fine-tuning.

    Keeps samples whose rendered target passes its own checker, dedupes by
    caption for diversity, and caps the result at the given fraction of
    the corpus.
    """
    from . import evalkit  # local import: evalkit is check-only

    def passes(sample: synthdata.TrainSample) -> bool:
        if sample.task == "generate":
            return evalkit.check_generation(sample.target, sample).overall == 1.0
        return evalkit.check_edit(sample.target, sample).edit_success

    kept_t2i, kept_edit = [], []
    seen: set[tuple] = set()
    for bank, kept in ((corpus.t2i, kept_t2i), (corpus.edit, kept_edit)):
        for s in bank:
            key = tuple(s.caption)
            if key in seen or not passes(s):
                continue
            seen.add(key)
            kept.append(s)
    cap_t2i = max(1, int(np.ceil(fraction * len(corpus.t2i)))) if corpus.t2i else 0
    cap_edit = max(1, int(np.ceil(fraction * len(corpus.edit)))) if corpus.edit else 0
    return synthdata.Corpus(t2i=kept_t2i[:cap_t2i], edit=kept_edit[:cap_edit],
                            side=corpus.side, seed=corpus.seed)


def run_sft(pipe: Pipeline, curated: EncodedCorpus, cfg: StageConfig,
            run_seed: int, stage_index: int = 3) -> dict:
    """Supervised fine-tuning: the unified loop on the curated subset."""
    if curated.n_t2i == 0 and curated.n_edit == 0:
        raise ValidationError("curated corpus is empty")
    if cfg.name != "sft":
        raise ConfigError("run_sft expects an sft stage config")
    return run_stage(pipe, cfg, curated, run_seed, stage_index)


# ---------------------------------------------------------------------------
# Checkpoints: one little-endian float32 blob + json manifest
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    blob = bytearray()
    index = {}
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        index[name] = {"shape": list(arr.shape), "dtype": "float32",
                       "offset": len(blob)}
        blob.extend(arr.tobytes())
    digest = hashlib.sha256(bytes(blob)).hexdigest()
    (path / "params.bin").write_bytes(bytes(blob))
    manifest = {"arrays": index, "sha256": digest, "meta": meta}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    bpath = path / "params.bin"
    if not mpath.exists() or not bpath.exists():
        raise CheckpointError(f"checkpoint {path} is missing manifest.json or params.bin")
    manifest = json.loads(mpath.read_text())
    blob = bpath.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"checkpoint {path} data does not match its manifest")
    arrays = {}
    for name, info in manifest["arrays"].items():
        if info["dtype"] != "float32":
            raise CheckpointError(f"array {name} has unsupported dtype {info['dtype']}")
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        start = info["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"array {name} extends past the data blob")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(info["shape"])
        arrays[name] = arr.copy()
    return arrays, manifest["meta"]


def save_pipeline(pipe: Pipeline, path: Path, extra_meta: dict | None = None) -> Path:
    meta = pipe.meta()
    meta.update(extra_meta or {})
    return save_checkpoint(path, pipe.state_arrays(), meta)


def load_pipeline(path: Path) -> Pipeline:
    from .pipeline import pipeline_from_meta

    arrays, meta = load_checkpoint(path)
    pipe = pipeline_from_meta(meta)
    pipe.load_state_arrays(arrays)
    return pipe


def convert_to_pix2pix(pipe: Pipeline) -> Pipeline:
    """Clone a single-panel pipeline into the widened channel-concat variant."""
    from .denoiser import Denoiser, DenoiserConfig
    from .pipeline import Pipeline as P

    dconfig = copy.deepcopy(pipe.dconfig)
    if dconfig.pix2pix:
        return pipe
    dconfig = DenoiserConfig(**{**dconfig.__dict__, "pix2pix": True,
                                "stage_channels": tuple(dconfig.stage_channels),
                                "transformer_blocks_per_stage": tuple(
                                    dconfig.transformer_blocks_per_stage)})
    net = Denoiser(dconfig)
    net.load_state_dict(widen_for_pix2pix(pipe.denoiser.state_dict(), dconfig))
    out = P(vocab=pipe.vocab, text=pipe.text, denoiser=net, codec=pipe.codec,
            dconfig=dconfig, resolution=pipe.resolution, mechanism="pix2pix",
            distilled=pipe.distilled, shift_table=pipe.shift_table)
    return out


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


class RunManifest:
    """Append-only record of a training run; no wall-clock fields, so two
    identical runs produce byte-identical manifests."""

    def __init__(self, config: dict, seed: int, path: Path | None = None):
        self.data = {
            "config": config,
            "config_hash": config_hash(config),
            "seed": seed,
            "stages": [],
            "events": [],
            "extra": {},
        }
        self.path = Path(path) if path else None
        self.save()

    def record_environment(self, pipe: Pipeline) -> None:
        self.data["vocab"] = pipe.vocab.words
        stats = pipe.codec.normalization_arrays()
        self.data["codec_stats"] = {k: [round(float(v), 8) for v in arr]
                                    for k, arr in stats.items()}
        self.data["param_count"] = pipe.param_count()
        self.save()

    def append_stage(self, cfg: StageConfig, metrics: dict, checkpoint_id: str) -> None:
        self.data["stages"].append({
            "config": asdict(cfg),
            "metrics": metrics,
            "checkpoint": checkpoint_id,
        })
        self.save()

    def append_event(self, message: str) -> None:
        self.data["events"].append(message)
        self.save()

    def set_extra(self, key: str, value) -> None:
        self.data["extra"][key] = value
        self.save()

    @property
    def stage_names(self) -> list[str]:
        return [s["config"]["name"] for s in self.data["stages"]]

    def save(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        tmp.replace(self.path)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        m = cls.__new__(cls)
        m.path = Path(path)
        m.data = json.loads(m.path.read_text())
        return m
