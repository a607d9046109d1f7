import numpy as np
import pytest
import torch

from pairflow import synthdata
from pairflow.codec import LosslessCodec
from pairflow.denoiser import DenoiserConfig
from pairflow.pipeline import build_pipeline


def tiny_denoiser_config(**kw) -> DenoiserConfig:
    """Small config for fast unit tests (still spec-shaped: MQA, ratio-3 FFN)."""
    base = dict(in_channels=48, stage_channels=(16, 24, 32),
                transformer_blocks_per_stage=(0, 1, 1),
                conv_blocks_per_stage=1, d_text=32, time_width=32)
    base.update(kw)
    return DenoiserConfig(**base)


@pytest.fixture(scope="session")
def fitted_codec() -> LosslessCodec:
    rng = np.random.default_rng(0)
    codec = LosslessCodec(factor=4)
    imgs = np.stack([synthdata.sample_t2i(rng, "1obj", 32).target for _ in range(32)])
    codec.fit_normalization(imgs)
    return codec


@pytest.fixture()
def tiny_pipeline(fitted_codec):
    torch.set_num_threads(1)
    pipe = build_pipeline(tiny_denoiser_config(), resolution=32, seed=0)
    pipe.codec.set_normalization(**{
        k.split(".")[1]: v for k, v in fitted_codec.normalization_arrays().items()
    })
    return pipe
