"""Desk-scale perturbation generator and multi-scale patch discriminators."""
import torch
from torch import nn
from torch.nn import functional as F

from .._rng import derive_seed

# generator/discriminators run in float32; the victim stays float64
DTYPE = torch.float32
DISCRIMINATOR_SCALES = (1, 2, 4)


def _conv(c_in, c_out, stride=1):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
                         nn.GroupNorm(min(4, c_out), c_out), nn.SiLU())


class GeneratorNet(nn.Module):
    """Three-level encoder-decoder with skip connections; output in [-1, 1]."""

    def __init__(self, channels=(16, 32, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.enc1 = _conv(3, c1)
        self.enc2 = _conv(c1, c2, stride=2)
        self.enc3 = _conv(c2, c3, stride=2)
        self.dec2 = _conv(c3 + c2, c2)
        self.dec1 = _conv(c2 + c1, c1)
        self.out = nn.Conv2d(c1, 3, 3, padding=1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:]), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:]), e1], dim=1))
        return torch.tanh(self.out(d1))


class PatchDiscriminator(nn.Module):
    """Scores a channel-stacked (condition, candidate) pair per patch, in (0, 1)."""

    def __init__(self, in_channels=6, width=16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, x):
        return torch.sigmoid(self.body(x))


class DiscriminatorSet(nn.Module):
    """Three discriminators applied at full, half and quarter resolution."""

    def __init__(self, width=16):
        super().__init__()
        self.nets = nn.ModuleList(PatchDiscriminator(6, width) for _ in DISCRIMINATOR_SCALES)

    def forward(self, condition, candidate):
        x = torch.cat([condition, candidate], dim=1)
        scores = []
        for factor, net in zip(DISCRIMINATOR_SCALES, self.nets):
            xs = x if factor == 1 else F.avg_pool2d(x, factor)
            scores.append(net(xs))
        return scores


def build(cls, seed, key, **kwargs):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, key) >> 1)
        net = cls(**kwargs)
    return net.to(DTYPE)
