"""Image <-> latent codecs.

The default codec is exactly invertible: a space-to-depth rearrangement
followed by a frozen per-channel affine normalization, so reconstruction
error never confounds downstream tests. A small learned convolutional
autoencoder with an 8x downsampling factor and 4 latent channels is
available behind the same interface for fidelity studies.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

_STD_FLOOR = 1e-4


def _to_chw(image) -> torch.Tensor:
    """Accept [H,W,3] / [B,H,W,3] numpy or [3,H,W] / [B,3,H,W] torch."""
    if isinstance(image, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(image)).float()
        if t.ndim == 3 and t.shape[-1] == 3:
            return t.permute(2, 0, 1)
        if t.ndim == 4 and t.shape[-1] == 3:
            return t.permute(0, 3, 1, 2)
        raise ShapeError(f"expected [...,H,W,3] image array, got {tuple(t.shape)}")
    t = image.float()
    if t.ndim not in (3, 4) or t.shape[-3] != 3:
        raise ShapeError(f"expected [.,3,H,W] tensor, got {tuple(t.shape)}")
    return t


class LosslessCodec:
    """Space-to-depth latents with frozen per-channel normalization.

    With factor f the latent has 3*f*f channels; decode(encode(x)) == x up
    to float32 rounding. Normalization statistics are fit once from a
    corpus sample and then frozen.
    """

    def __init__(self, factor: int = 4,
                 mean: np.ndarray | None = None,
                 std: np.ndarray | None = None):
        self.factor = int(factor)
        self.channels = 3 * self.factor * self.factor
        if mean is None:
            mean = np.zeros(self.channels, dtype=np.float32)
        if std is None:
            std = np.ones(self.channels, dtype=np.float32)
        self.set_normalization(mean, std)
        self._blank_cache: dict[tuple[int, int], torch.Tensor] = {}

    # -- normalization -----------------------------------------------------

    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        mean = np.asarray(mean, dtype=np.float32)
        std = np.asarray(std, dtype=np.float32)
        if mean.shape != (self.channels,) or std.shape != (self.channels,):
            raise ShapeError(
                f"normalization stats must have shape ({self.channels},), "
                f"got {mean.shape} and {std.shape}"
            )
        if not (np.isfinite(mean).all() and np.isfinite(std).all()):
            raise ValidationError("normalization stats must be finite")
        if (std <= 0).any():
            raise ValidationError("normalization std must be positive")
        self._mean = torch.from_numpy(mean.copy()).view(1, -1, 1, 1)
        self._std = torch.from_numpy(std.copy()).view(1, -1, 1, 1)
        self._blank_cache = {}

    def fit_normalization(self, images) -> None:
        """Compute per-channel mean/std over a corpus sample; frozen afterwards."""
        x = _to_chw(np.stack(images) if isinstance(images, (list, tuple)) else images)
        if x.ndim == 3:
            x = x[None]
        raw = F.pixel_unshuffle(x.double(), self.factor)
        mean = raw.mean(dim=(0, 2, 3))
        std = raw.std(dim=(0, 2, 3), unbiased=False).clamp_min(_STD_FLOOR)
        self.set_normalization(
            mean.float().numpy(), std.float().numpy()
        )

    def normalization_arrays(self) -> dict[str, np.ndarray]:
        return {
            "codec.mean": self._mean.view(-1).numpy().copy(),
            "codec.std": self._std.view(-1).numpy().copy(),
        }

    # -- encode / decode ----------------------------------------------------

    def encode(self, image) -> torch.Tensor:
        x = _to_chw(image)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ShapeError(
                f"image dims ({h}, {w}) not divisible by factor {self.factor}"
            )
        z = (F.pixel_unshuffle(x, self.factor) - self._mean) / self._std
        return z[0] if squeeze else z

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Inverse of encode; returns [.,3,H,W]. No clamping (export clamps)."""
        z = latent.float()
        squeeze = z.ndim == 3
        if squeeze:
            z = z[None]
        if z.shape[-3] != self.channels:
            raise ShapeError(
                f"latent has {z.shape[-3]} channels, codec expects {self.channels}"
            )
        x = F.pixel_shuffle(z * self._std + self._mean, self.factor)
        return x[0] if squeeze else x

    def blank_latent(self, side: int) -> torch.Tensor:
        """Latent of the all-black image; cached per raster size."""
        key = (side, side)
        if key not in self._blank_cache:
            zero = np.zeros((side, side, 3), dtype=np.float32)
            self._blank_cache[key] = self.encode(zero)
        return self._blank_cache[key]

    def latent_hw(self, side: int) -> tuple[int, int]:
        return side // self.factor, side // self.factor


def decode_to_raster(codec, latent: torch.Tensor) -> np.ndarray:
    """Decode and clamp to [0,1] for export; returns [H,W,3] float32."""
    x = codec.decode(latent)
    if x.ndim == 4:
        return x.clamp(0, 1).permute(0, 2, 3, 1).numpy().astype(np.float32)
    return x.clamp(0, 1).permute(1, 2, 0).numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# Optional learned codec (not used by default)
# ---------------------------------------------------------------------------


class TinyAutoencoder(nn.Module):
    """Small conv autoencoder, factor 8, 4 latent channels, MSE-trained."""

    factor = 8
    channels = 4

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.enc = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w * 2, w * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w * 2, self.channels, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(self.channels, w * 2, 1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w * 2, w * 2, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w * 2, w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, 3, 3, padding=1),
        )
        self._blank_cache: dict[tuple[int, int], torch.Tensor] = {}

    @torch.no_grad()
    def encode(self, image) -> torch.Tensor:
        x = _to_chw(image)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.shape[-2] % self.factor or x.shape[-1] % self.factor:
            raise ShapeError("image dims not divisible by factor 8")
        z = self.enc(x)
        return z[0] if squeeze else z

    @torch.no_grad()
    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        z = latent.float()
        squeeze = z.ndim == 3
        if squeeze:
            z = z[None]
        if z.shape[-3] != self.channels:
            raise ShapeError(f"latent has {z.shape[-3]} channels, expected {self.channels}")
        x = self.dec(z)
        return x[0] if squeeze else x

    def blank_latent(self, side: int) -> torch.Tensor:
        key = (side, side)
        if key not in self._blank_cache:
            zero = np.zeros((side, side, 3), dtype=np.float32)
            self._blank_cache[key] = self.encode(zero)
        return self._blank_cache[key]

    def latent_hw(self, side: int) -> tuple[int, int]:
        return side // self.factor, side // self.factor


def train_tiny_autoencoder(model: TinyAutoencoder, images: np.ndarray,
                           steps: int = 500, batch_size: int = 16,
                           lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Reconstruction-MSE training loop; returns the loss curve."""
    gen = torch.Generator().manual_seed(seed)
    data = _to_chw(images)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, data.shape[0], (batch_size,), generator=gen)
        batch = data[idx]
        recon = model.dec(model.enc(batch))
        loss = F.mse_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
    return losses
