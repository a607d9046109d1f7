"""Run configuration: strict JSON schema, resolution profiles, hashing.

Unknown keys are rejected everywhere; the resolved configuration and its
content hash are written into the run manifest before any work happens.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

PROFILE_NAMES = ("res32", "res64", "res128")

# Per-profile stage defaults, sized so the smaller profiles train in
# reasonable wall time on modest hardware. The paper-scale staged learning
# rates (1e-4 / 1e-5 / 1e-6) remain the StageConfig defaults; profiles
# override them for short desk runs and the manifest records the result.
PROFILES: dict[str, dict] = {
    "res32": {
        "resolution": 32,
        "progressive_t2i": False,
        "stages": {
            "t2i": {"steps": 6000, "batch_size": 64, "lr": 1e-3},
            "edit": {"steps": 3000, "batch_size": 48, "lr": 4e-4},
            "unified": {"steps": 1500, "batch_size": 48, "lr": 2e-4},
            "sft": {"steps": 300, "batch_size": 48, "lr": 5e-5},
        },
    },
    "res64": {
        "resolution": 64,
        "progressive_t2i": True,
        "stages": {
            "t2i": {"steps": 8000, "batch_size": 64, "lr": 1e-3},
            "t2i.1": {"steps": 4000, "batch_size": 32, "lr": 5e-4},
            "edit": {"steps": 5000, "batch_size": 32, "lr": 3e-4},
            "unified": {"steps": 2500, "batch_size": 32, "lr": 1e-4},
            "sft": {"steps": 500, "batch_size": 32, "lr": 3e-5},
        },
    },
    "res128": {
        "resolution": 128,
        "progressive_t2i": True,
        "stages": {
            "t2i": {"steps": 12000, "batch_size": 32, "lr": 8e-4},
            "t2i.1": {"steps": 6000, "batch_size": 16, "lr": 4e-4},
            "edit": {"steps": 8000, "batch_size": 16, "lr": 2e-4},
            "unified": {"steps": 4000, "batch_size": 16, "lr": 1e-4},
            "sft": {"steps": 800, "batch_size": 16, "lr": 3e-5},
        },
    },
}


def _strict_fields(cls, d: dict, where: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return d


@dataclass
class CorpusConfig:
    n_t2i: int = 4096
    n_edit: int = 2048
    seed_offset: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return cls(**_strict_fields(cls, d, "corpus"))


@dataclass
class SamplerConfig:
    steps: int = 32
    cfg_scale: float = 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**_strict_fields(cls, d, "sampler"))


@dataclass
class EvalConfig:
    n_generation: int = 200
    n_edit: int = 120
    suite_seed: int = 5

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**_strict_fields(cls, d, "eval"))


_ARCH_KEYS = {
    "in_channels", "stage_channels", "transformer_blocks_per_stage",
    "conv_blocks_per_stage", "conv_expansion", "ffn_ratio", "q_heads",
    "kv_heads", "high_res_self_attention", "d_text", "time_width",
}

_STAGE_OVERRIDE_KEYS = {
    "steps", "batch_size", "lr", "resolution", "mechanism", "loss",
    "cfg_drop", "logit_loc", "logit_scale", "weight_decay", "grad_clip",
    "log_every", "ema_decay", "literal_double_weight", "supervise_condition_panel",
}

_REFL_KEYS = {
    "steps", "batch_size", "lr", "b_percentile", "t_lo", "t_hi",
    "partial_steps", "cfg_scale", "calibration_samples", "eval_every",
    "guard_drop_points", "lambda_outside", "kernel_tau", "alternate",
    "weight_decay", "grad_clip",
}

_DMD_KEYS = {
    "outer_steps", "batch_size", "g_lr", "fake_lr", "disc_lr",
    "fake_steps_per_g", "dmd_weight", "gan_weight", "cfg_real", "t_min",
    "t_max", "normalize_grad", "eval_every", "collapse_points",
    "collapse_patience", "edit_fraction",
}


def _check_keys(d: dict, allowed: set[str], where: str) -> dict:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return dict(d)


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "res64"
    codec: str = "lossless"  # "lossless" | "tiny-ae"
    recipe: str = "tpj"
    out_root: str = "runs"
    name: str | None = None
    torch_threads: int | None = 1
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    stages: dict = field(default_factory=dict)  # stage key -> field overrides
    arch: dict = field(default_factory=dict)
    refl: dict = field(default_factory=dict)
    dmd: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.profile not in PROFILE_NAMES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.codec not in ("lossless", "tiny-ae"):
            raise ConfigError(f"unknown codec mode {self.codec!r}")
        self.arch = _check_keys(self.arch, _ARCH_KEYS, "arch")
        self.refl = _check_keys(self.refl, _REFL_KEYS, "refl")
        self.dmd = _check_keys(self.dmd, _DMD_KEYS, "dmd")
        for key, ov in self.stages.items():
            base = key.split(".")[0]
            if base not in ("t2i", "edit", "unified", "sft"):
                raise ConfigError(f"unknown stage override key {key!r}")
            _check_keys(ov, _STAGE_OVERRIDE_KEYS, f"stage {key!r}")

    @property
    def resolution(self) -> int:
        return PROFILES[self.profile]["resolution"]

    def stage_overrides(self) -> dict[str, dict]:
        merged: dict[str, dict] = {}
        for key, ov in PROFILES[self.profile]["stages"].items():
            merged[key] = dict(ov)
        for key, ov in self.stages.items():
            merged.setdefault(key, {})
            merged[key].update(ov)
        return merged

    @property
    def progressive_t2i(self) -> bool:
        return PROFILES[self.profile]["progressive_t2i"]

    def resolved_out_root(self) -> Path:
        return Path(os.environ.get("UFL_OUT", self.out_root))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(_strict_fields(cls, d, "run config"))
        if "corpus" in d:
            d["corpus"] = CorpusConfig.from_dict(d["corpus"])
        if "sampler" in d:
            d["sampler"] = SamplerConfig.from_dict(d["sampler"])
        if "eval" in d:
            d["eval"] = EvalConfig.from_dict(d["eval"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data)
