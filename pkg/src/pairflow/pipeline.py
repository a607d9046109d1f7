"""Model bundle: codec + text encoder + denoiser, with batched inference.

Construction is seeded so two builds from the same seed are bit-identical.
The bundle knows which input mechanism its checkpoint was trained with
(single-panel, in-context, or pix2pix) and whether it is a distilled
4-step student, and routes sampling accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import flowmatch, synthdata, textcond
from .codec import LosslessCodec, decode_to_raster
from .denoiser import Denoiser, DenoiserConfig, parameter_count
from .errors import ValidationError


@dataclass
class Pipeline:
    vocab: textcond.Vocabulary
    text: textcond.TextEncoder
    denoiser: Denoiser
    codec: LosslessCodec
    dconfig: DenoiserConfig
    resolution: int
    mechanism: str = "in-context"  # inference input mode for the current params
    distilled: bool = False
    shift_table: dict[int, float] = field(default_factory=lambda: dict(flowmatch.DEFAULT_TIME_SHIFTS))

    def trainable_modules(self) -> list[torch.nn.Module]:
        return [self.denoiser, self.text]

    def parameters(self):
        for m in self.trainable_modules():
            yield from m.parameters()

    def param_count(self) -> int:
        return parameter_count(self.denoiser) + parameter_count(self.text)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for prefix, module in (("denoiser", self.denoiser), ("text", self.text)):
            for name, tensor in module.state_dict().items():
                arrays[f"{prefix}.{name}"] = tensor.detach().numpy().astype(np.float32)
        arrays.update(self.codec.normalization_arrays())
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, module in (("denoiser", self.denoiser), ("text", self.text)):
            sd = {}
            for name, tensor in module.state_dict().items():
                key = f"{prefix}.{name}"
                arr = arrays[key]
                if tuple(arr.shape) != tuple(tensor.shape):
                    raise ValidationError(
                        f"array {key} has shape {arr.shape}, expected {tuple(tensor.shape)}"
                    )
                sd[name] = torch.from_numpy(arr.copy())
            module.load_state_dict(sd)
        self.codec.set_normalization(arrays["codec.mean"], arrays["codec.std"])

    def meta(self) -> dict:
        return {
            "denoiser_config": {
                "in_channels": self.dconfig.in_channels,
                "stage_channels": list(self.dconfig.stage_channels),
                "transformer_blocks_per_stage": list(self.dconfig.transformer_blocks_per_stage),
                "conv_blocks_per_stage": self.dconfig.conv_blocks_per_stage,
                "conv_expansion": self.dconfig.conv_expansion,
                "ffn_ratio": self.dconfig.ffn_ratio,
                "q_heads": self.dconfig.q_heads,
                "kv_heads": self.dconfig.kv_heads,
                "high_res_self_attention": self.dconfig.high_res_self_attention,
                "d_text": self.dconfig.d_text,
                "time_width": self.dconfig.time_width,
                "pix2pix": self.dconfig.pix2pix,
            },
            "vocab": self.vocab.words,
            "resolution": self.resolution,
            "mechanism": self.mechanism,
            "distilled": self.distilled,
            "codec_factor": self.codec.factor,
            "param_count": self.param_count(),
        }


def build_pipeline(dconfig: DenoiserConfig, resolution: int, seed: int,
                   codec: LosslessCodec | None = None,
                   vocab: textcond.Vocabulary | None = None) -> Pipeline:
    vocab = vocab or textcond.Vocabulary()
    codec = codec or LosslessCodec(factor=4)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        text = textcond.TextEncoder(vocab, d_text=dconfig.d_text)
        net = Denoiser(dconfig)
    return Pipeline(vocab=vocab, text=text, denoiser=net, codec=codec,
                    dconfig=dconfig, resolution=resolution)


def pipeline_from_meta(meta: dict) -> Pipeline:
    dc = meta["denoiser_config"]
    dconfig = DenoiserConfig(
        in_channels=dc["in_channels"],
        stage_channels=tuple(dc["stage_channels"]),
        transformer_blocks_per_stage=tuple(dc["transformer_blocks_per_stage"]),
        conv_blocks_per_stage=dc["conv_blocks_per_stage"],
        conv_expansion=dc["conv_expansion"],
        ffn_ratio=dc["ffn_ratio"],
        q_heads=dc["q_heads"],
        kv_heads=dc["kv_heads"],
        high_res_self_attention=dc["high_res_self_attention"],
        d_text=dc["d_text"],
        time_width=dc["time_width"],
        pix2pix=dc.get("pix2pix", False),
    )
    pipe = build_pipeline(dconfig, meta["resolution"], seed=0,
                          codec=LosslessCodec(factor=meta["codec_factor"]),
                          vocab=textcond.Vocabulary(meta["vocab"]))
    pipe.mechanism = meta["mechanism"]
    pipe.distilled = meta["distilled"]
    return pipe


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def caption_ids(vocab: textcond.Vocabulary, samples: list[synthdata.TrainSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([vocab.tokenize(s.task, s.caption) for s in samples]))


def _sample_latents(pipe: Pipeline, samples: list[synthdata.TrainSample],
                    steps: int, cfg_scale: float, generator: torch.Generator,
                    mechanism: str) -> torch.Tensor:
    """Shared sampler body for generation and editing prompts."""
    side = pipe.resolution
    cond_embed = pipe.text(caption_ids(pipe.vocab, samples))
    latent_hw = pipe.codec.latent_hw(side)
    latent_shape = (pipe.codec.channels, *latent_hw)
    cond_latent = None
    if mechanism != "single":
        panels = []
        for s in samples:
            if s.task == "edit":
                panels.append(pipe.codec.encode(s.condition))
            else:
                panels.append(pipe.codec.blank_latent(side))
        cond_latent = torch.stack(panels)
    if pipe.distilled:
        from . import dmd  # lazy: dmd imports this module

        spec = flowmatch.SamplerSpec(steps=4, cfg_scale=0.0,
                                     shift=flowmatch.shift_for_resolution(side, pipe.shift_table),
                                     mechanism=mechanism, distilled=True)
        return dmd.few_step_sample(pipe.denoiser, dmd.four_step_schedule(), spec,
                                   cond_embed, latent_shape, generator,
                                   cond_latent=cond_latent, batch=len(samples))
    null_embed = None
    if cfg_scale > 0:
        # task-preserving null rows, matching the training-time caption drop
        null_rows = [pipe.vocab.null_tokens(s.task) for s in samples]
        null_embed = pipe.text(torch.from_numpy(np.stack(null_rows)))
    spec = flowmatch.SamplerSpec(steps=steps, cfg_scale=cfg_scale,
                                 shift=flowmatch.shift_for_resolution(side, pipe.shift_table),
                                 mechanism=mechanism)
    with torch.no_grad():
        return flowmatch.euler_sample(pipe.denoiser, spec, cond_embed, latent_shape,
                                      generator, cond_latent=cond_latent,
                                      null_embed=null_embed, batch=len(samples))


def run_inference(pipe: Pipeline, samples: list[synthdata.TrainSample],
                  steps: int = 32, cfg_scale: float = 0.0, seed: int = 0,
                  batch_size: int = 50, mechanism: str | None = None) -> np.ndarray:
    """Sample images for a list of prompts; returns [N, H, W, 3] float32.

    Generation prompts pair the blank latent as the condition panel;
    editing prompts pair their encoded source image.
    """
    mechanism = mechanism or pipe.mechanism
    generator = torch.Generator().manual_seed(seed)
    outs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        latents = _sample_latents(pipe, chunk, steps, cfg_scale, generator, mechanism)
        outs.append(decode_to_raster(pipe.codec, latents))
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,))
