"""Multi-scale structural similarity, differentiable (torch, float64).

Luminance is compared only at the coarsest scale; contrast and structure at
every scale. Local statistics use an 11x11 Gaussian window (std 1.5) with
valid padding; scales are formed by 2x average pooling. Each component map is
averaged spatially and per channel before exponentiation, and the final score
is the mean over channels.
"""
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from ..exceptions import ConfigError

MAX_DEFAULT_LEVELS = 5
# keeps fractional powers of a (rarely) non-positive mean structure term defined
COMPONENT_FLOOR = 1e-8


@dataclass(frozen=True)
class MsSsimConfig:
    levels: int = None
    alpha: float = 1.0
    betas: tuple = None
    gammas: tuple = None
    c1: float = (0.01 * 1.0) ** 2
    c2: float = (0.03 * 1.0) ** 2
    c3: float = None
    window_size: int = 11
    window_sigma: float = 1.5

    def __post_init__(self):
        if self.levels is not None and self.levels < 1:
            raise ConfigError(f"MS-SSIM levels must be >= 1, got {self.levels}")
        for name in ("c1", "c2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"MS-SSIM constant {name} must be > 0")
        if self.c3 is not None and not self.c3 > 0:
            raise ConfigError("MS-SSIM constant c3 must be > 0")
        if self.window_size % 2 != 1:
            raise ConfigError("MS-SSIM window size must be odd")
        for name in ("betas", "gammas"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(float(v) for v in value))
                if self.levels is not None and len(value) != self.levels:
                    raise ConfigError(f"MS-SSIM needs {self.levels} {name}, got {len(value)}")

    def resolve(self, image_shape):
        """Concrete config for ``image_shape``: levels, exponents and c3 filled in."""
        feasible = max_levels(image_shape, self.window_size)
        if feasible < 1:
            raise ConfigError(f"image of shape {tuple(image_shape)} is smaller than the "
                              f"{self.window_size}x{self.window_size} MS-SSIM window")
        levels = self.levels
        if levels is None:
            levels = len(self.betas) if self.betas is not None else min(feasible, MAX_DEFAULT_LEVELS)
        if levels > feasible:
            raise ConfigError(f"image of shape {tuple(image_shape)} supports at most {feasible} "
                              f"MS-SSIM levels with window {self.window_size}; got levels={levels}")
        betas = self.betas if self.betas is not None else (1.0 / levels,) * levels
        gammas = self.gammas if self.gammas is not None else (1.0 / levels,) * levels
        if len(betas) != levels or len(gammas) != levels:
            raise ConfigError(f"MS-SSIM needs {levels} betas and gammas")
        c3 = self.c3 if self.c3 is not None else self.c2 / 2
        return MsSsimConfig(levels=levels, alpha=self.alpha, betas=betas, gammas=gammas,
                            c1=self.c1, c2=self.c2, c3=c3, window_size=self.window_size,
                            window_sigma=self.window_sigma)


def max_levels(image_shape, window_size=11):
    """Number of scales whose smaller side is still at least ``window_size``."""
    side, levels = min(image_shape[-2:]), 0
    while side >= window_size:
        levels += 1
        side //= 2
    return levels


def gaussian_kernel_1d(size, sigma):
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def gaussian_window(size, sigma):
    g = gaussian_kernel_1d(size, sigma)
    return np.outer(g, g)


def _safe_sqrt(v):
    # exact value, finite gradient at zero variance
    positive = v > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, v, torch.ones_like(v))),
                       torch.zeros_like(v))


def _components(x, y, kernel, cfg):
    """Spatially averaged (l, c, s) per image and channel, each shape (n, ch)."""
    ch = x.shape[1]
    k = len(kernel)
    wv = kernel.view(1, 1, k, 1).expand(ch, 1, k, 1)
    wh = kernel.view(1, 1, 1, k).expand(ch, 1, 1, k)

    def filt(t):
        # separable valid-mode Gaussian filter
        return F.conv2d(F.conv2d(t, wv, groups=ch), wh, groups=ch)

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    sd_x, sd_y = _safe_sqrt(var_x), _safe_sqrt(var_y)
    lum = (2 * mu_x * mu_y + cfg.c1) / (mu_x ** 2 + mu_y ** 2 + cfg.c1)
    con = (2 * sd_x * sd_y + cfg.c2) / (var_x.clamp_min(0) + var_y.clamp_min(0) + cfg.c2)
    struct = (cov + cfg.c3) / (sd_x * sd_y + cfg.c3)
    return lum.mean(dim=(2, 3)), con.mean(dim=(2, 3)), struct.mean(dim=(2, 3))


def ms_ssim_torch(a, b, config=None):
    """Batched MS-SSIM of ``(n, C, H, W)`` tensors; returns shape ``(n,)``."""
    if a.shape != b.shape:
        raise ConfigError(f"MS-SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    cfg = (config or MsSsimConfig()).resolve(a.shape[-2:])
    kernel = torch.as_tensor(gaussian_kernel_1d(cfg.window_size, cfg.window_sigma), dtype=a.dtype)
    score = torch.ones(a.shape[:2], dtype=a.dtype)
    x, y = a, b
    for j in range(cfg.levels):
        lum, con, struct = _components(x, y, kernel, cfg)
        score = score * con.clamp_min(COMPONENT_FLOOR) ** cfg.betas[j]
        score = score * struct.clamp_min(COMPONENT_FLOOR) ** cfg.gammas[j]
        if j == cfg.levels - 1:
            score = score * lum.clamp_min(COMPONENT_FLOOR) ** cfg.alpha
        else:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    return score.mean(dim=1)


def ms_ssim(a, b, config=None):
    """MS-SSIM of two ``(3, H, W)`` images in [0, 1]; a float in (0, 1]."""
    a = torch.as_tensor(np.asarray(a, dtype=np.float64))
    b = torch.as_tensor(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ConfigError(f"MS-SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        return float(ms_ssim_torch(a[None], b[None], config)[0])
    return ms_ssim_torch(a, b, config).numpy()
