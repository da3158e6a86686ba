"""Pixel-selection mask via a Gumbel top-k relaxation."""
from dataclasses import dataclass

import numpy as np
import torch

from .._rng import philox
from ..exceptions import ConfigError

SOFT_TRAIN = "soft_train"
HARD_INFER = "hard_infer"


@dataclass(frozen=True)
class MaskConfig:
    active_pixel_fraction: float = 1.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.active_pixel_fraction <= 1:
            raise ConfigError(f"active_pixel_fraction must lie in (0, 1], got "
                              f"{self.active_pixel_fraction}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    def active_count(self, num_pixels):
        k = int(np.floor(self.active_pixel_fraction * num_pixels + 0.5))
        if k < 1:
            raise ConfigError(f"active_pixel_fraction={self.active_pixel_fraction} keeps 0 of "
                              f"{num_pixels} pixels")
        return k


def gumbel_noise(shape, seed, *keys):
    u = philox(seed, "gumbel", *keys).random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_mask(selection_logits, config, mode=HARD_INFER, noise_key=0):
    """Per-pixel mask from ``selection_logits`` (an ``(H, W)`` map).

    ``hard_infer`` keeps exactly ``round(fraction * H * W)`` pixels with the
    largest noisy logits (ties go to the lower flat pixel index).
    ``soft_train`` returns ``sigmoid((z - t) / temperature)`` where ``z`` are the
    noisy logits and ``t`` sits midway between the k-th and (k+1)-th largest,
    so it tends to the hard mask as the temperature goes to zero.
    The Gumbel noise is fixed by ``(config.seed, noise_key)``.
    """
    if mode not in (SOFT_TRAIN, HARD_INFER):
        raise ConfigError(f"unknown mask mode {mode!r}")
    is_tensor = isinstance(selection_logits, torch.Tensor)
    logits = selection_logits if is_tensor else torch.as_tensor(
        np.asarray(selection_logits, dtype=np.float64))
    n = logits.numel()
    k = config.active_count(n)
    noise = torch.as_tensor(gumbel_noise(tuple(logits.shape), config.seed, noise_key),
                            dtype=logits.dtype)
    z = (logits + noise).reshape(-1)

    order = np.argsort(-z.detach().cpu().numpy(), kind="stable")
    if mode == HARD_INFER:
        flat = torch.zeros(n, dtype=logits.dtype)
        flat[torch.as_tensor(order[:k])] = 1.0
        out = flat.reshape(logits.shape)
    elif k == n:
        out = torch.ones_like(logits)
    else:
        thr = 0.5 * (z[order[k - 1]] + z[order[k]]).detach()
        out = torch.sigmoid((z - thr) / config.temperature).reshape(logits.shape)
    return out if is_tensor else out.detach().numpy()
