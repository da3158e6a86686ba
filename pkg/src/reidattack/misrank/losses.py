"""Attack objectives for the mis-ranking generator.

Every loss accepts numpy arrays (returning a float) or torch tensors
(returning a differentiable scalar tensor).
"""
from dataclasses import dataclass

import numpy as np
import torch

from ..exceptions import BatchCompositionError, ConfigError
from .msssim import ms_ssim_torch

SCORE_EPS = 1e-7
clamp_events = {"count": 0}


@dataclass(frozen=True)
class MisrankLossWeights:
    w_gan: float = 1.0
    w_etri: float = 1.0
    w_xent: float = 1.0
    w_vp: float = 1.0
    delta_margin: float = 0.3
    smoothing: float = 0.1

    def __post_init__(self):
        weights = (self.w_gan, self.w_etri, self.w_xent, self.w_vp)
        if min(weights) < 0:
            raise ConfigError(f"loss weights must be non-negative, got {weights}")
        if max(weights) <= 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.delta_margin < 0:
            raise ConfigError(f"delta_margin must be >= 0, got {self.delta_margin}")
        if not 0 <= self.smoothing <= 1:
            raise ConfigError(f"smoothing must lie in [0, 1], got {self.smoothing}")


def _tensor(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def _out(value, was_tensor):
    return value if was_tensor else float(value)


def _clamp_scores(s):
    bad = int(((s < SCORE_EPS) | (s > 1 - SCORE_EPS)).sum())
    if bad:
        clamp_events["count"] += bad
    return s.clamp(SCORE_EPS, 1 - SCORE_EPS)


def loss_gan(d_real_scores, d_fake_scores):
    """Mean over scales of ``E[log D(real)] + E[log(1 - D(fake))]``.

    Both arguments are sequences with one score map per discriminator scale.
    Scores outside ``[1e-7, 1 - 1e-7]`` are clamped and counted in ``clamp_events``.
    """
    if len(d_real_scores) != len(d_fake_scores) or not d_real_scores:
        raise ConfigError("need one real and one fake score map per discriminator scale")
    total, was_tensor = 0.0, False
    for real, fake in zip(d_real_scores, d_fake_scores):
        real, t1 = _tensor(real)
        fake, t2 = _tensor(fake)
        was_tensor = was_tensor or t1 or t2
        total = total + torch.log(_clamp_scores(real)).mean() + torch.log1p(-_clamp_scores(fake)).mean()
    return _out(total / len(d_real_scores), was_tensor)


def loss_gan_generator(d_fake_scores):
    """The generator's share of the GAN objective: mean over scales of ``E[log(1 - D(fake))]``."""
    terms = [torch.log1p(-_clamp_scores(_tensor(f)[0])).mean() for f in d_fake_scores]
    return sum(terms) / len(terms)


def _check_batch(labels):
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise BatchCompositionError(f"mis-ranking loss needs >= 2 identities per batch, got {len(ids)}")
    if counts.max() < 2:
        raise BatchCompositionError("mis-ranking loss needs >= 2 samples of at least one identity")


def loss_adv_etri(embeddings, labels, delta_margin=0.3):
    """Hinge mis-ranking loss summed over anchors.

    For each anchor: the largest squared distance to a different identity,
    minus the smallest squared distance to another sample of its own identity,
    plus the margin, clamped at zero. Anchors without a same-identity partner
    contribute nothing.
    """
    emb, was_tensor = _tensor(embeddings)
    labels = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels)
    if len(labels) != emb.shape[0]:
        raise BatchCompositionError(f"{emb.shape[0]} embeddings but {len(labels)} labels")
    _check_batch(labels)
    diff = emb[:, None, :] - emb[None, :, :]
    sq = (diff * diff).sum(-1)
    lab = torch.as_tensor(labels)
    same = lab[:, None] == lab[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    matched = same & ~eye
    mismatched = ~same
    has_partner = matched.any(dim=1)
    inf = torch.tensor(float("inf"), dtype=sq.dtype)
    far_neg = torch.where(mismatched, sq, -inf).max(dim=1).values
    near_pos = torch.where(matched, sq, inf).min(dim=1).values
    hinge = (far_neg - near_pos + delta_margin).clamp_min(0.0)
    total = torch.where(has_partner, hinge, torch.zeros_like(hinge)).sum()
    return _out(total, was_tensor)


def least_likely_target(clean_probs, ground_truth, smoothing):
    """Target distribution ``(1 - smoothing) * onehot(argmin clean) + smoothing * u``.

    ``u`` is uniform over all classes except the ground truth.
    """
    p = np.atleast_2d(np.asarray(clean_probs, dtype=np.float64))
    n, k = p.shape
    if k < 2:
        raise ConfigError("least-likely target needs K >= 2 classes")
    gt = np.broadcast_to(np.asarray(ground_truth), (n,))
    if gt.min() < 0 or gt.max() >= k:
        raise ConfigError(f"ground-truth id outside [0, {k})")
    target = np.zeros((n, k))
    target[np.arange(n), np.argmin(p, axis=1)] += 1.0 - smoothing
    uniform = np.full((n, k), 1.0 / (k - 1))
    uniform[np.arange(n), gt] = 0.0
    return target + smoothing * uniform


def loss_adv_xent(probs, clean_probs, ground_truth, smoothing=0.1, num_classes=None):
    """Cross-entropy of ``probs`` against the least-likely smoothed target.

    ``probs`` may be a single vector or a batch (the batch mean is returned).
    """
    p, was_tensor = _tensor(probs)
    if num_classes is not None and p.shape[-1] != num_classes:
        raise ConfigError(f"expected {num_classes} classes, got {p.shape[-1]}")
    clean = clean_probs.detach().cpu().numpy() if isinstance(clean_probs, torch.Tensor) else clean_probs
    target = torch.as_tensor(least_likely_target(clean, ground_truth, smoothing), dtype=p.dtype)
    logp = torch.log(torch.atleast_2d(p).clamp_min(1e-300))
    return _out(-(target * logp).sum(dim=1).mean(), was_tensor)


def loss_adv_xent_logits(adv_logits, clean_logits, ground_truth, smoothing):
    """Batch-mean form of :func:`loss_adv_xent` on logits (numerically stable)."""
    clean = torch.softmax(clean_logits.detach(), dim=1).cpu().numpy()
    target = torch.as_tensor(least_likely_target(clean, np.asarray(ground_truth), smoothing),
                             dtype=adv_logits.dtype)
    return -(target * torch.log_softmax(adv_logits, dim=1)).sum(dim=1).mean()


def loss_vp(clean, adversarial, config=None):
    """Perception penalty ``1 - mean MS-SSIM``; zero when the images are unchanged."""
    return 1.0 - ms_ssim_torch(clean, adversarial, config).mean()
