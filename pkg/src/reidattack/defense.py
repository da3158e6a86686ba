"""Inference-time dropout defense and the dropout-rate sweep."""
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.utils.validation import check_is_fitted

from ._rng import array_digest, philox
from .exceptions import ConfigError
from .metrics import EvalProtocol, evaluate_reid
from .model import DTYPE, INFERENCE_CHUNK, normalize_embeddings

DEFAULT_RATES = (0.025, 0.05, 0.1, 0.25, 0.5, 0.75)
SWEEP_COLUMNS = ("rate", "condition", "mAP", "R-1", "R-5", "R-10")
BASELINE_CONDITION = "NoAttack"


@dataclass(frozen=True)
class DropoutDefenseConfig:
    rate: float = 0.0
    passes: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if int(self.passes) != self.passes or self.passes < 1:
            raise ConfigError(f"passes must be an integer >= 1, got {self.passes}")


class DefendedVictim:
    """A victim whose hidden layers drop activations at inference time.

    Every hidden output (each convolutional block and the embedding) gets an
    independent Bernoulli keep-mask with inverted scaling ``1 / (1 - rate)``.
    Masks are keyed by ``(seed, image content, pass, layer)``, so an image's
    output is the same regardless of batch composition or order. With
    ``passes > 1`` embeddings and probabilities are averaged over passes.
    """

    def __init__(self, victim, config):
        check_is_fitted(victim, "net_")
        self.victim = victim
        self.config = config
        self.classes_ = victim.classes_
        self.image_shape_ = victim.image_shape_

    def _hook(self, keys, pass_index):
        rate, seed = self.config.rate, self.config.seed
        keep_scale = 1.0 / (1.0 - rate)

        def hook(h, layer):
            masks = np.stack([philox(seed, "dropout", k, pass_index, layer).random(h.shape[1:])
                              >= rate for k in keys])
            return h * torch.as_tensor(masks, dtype=h.dtype) * keep_scale
        return hook

    def _raw(self, X):
        """Mean (embedding, probability) over passes, unnormalized embeddings."""
        X = self.victim._check_input(X)
        if self.config.rate == 0:
            emb, logits = self.victim._forward(X)
            return emb, torch.softmax(logits, dim=1)
        keys = [array_digest(x) for x in X]
        emb_out, prob_out = [], []
        with torch.no_grad():
            for start in range(0, len(X), INFERENCE_CHUNK):
                stop = start + INFERENCE_CHUNK
                x = torch.as_tensor(X[start:stop], dtype=DTYPE)
                emb_sum = prob_sum = 0
                for p in range(self.config.passes):
                    e, lg = self.victim.net_(x, self._hook(keys[start:stop], p))
                    emb_sum = emb_sum + e
                    prob_sum = prob_sum + torch.softmax(lg, dim=1)
                emb_out.append(emb_sum / self.config.passes)
                prob_out.append(prob_sum / self.config.passes)
        return torch.cat(emb_out), torch.cat(prob_out)

    def transform(self, X):
        return normalize_embeddings(self._raw(X)[0]).numpy()

    def predict_proba(self, X):
        return self._raw(X)[1].numpy()

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


def apply_inference_dropout(model, config=DropoutDefenseConfig()):
    return DefendedVictim(model, config)


def defense_sweep(model, bundle, attacks, rates=DEFAULT_RATES, protocol=EvalProtocol(), passes=1,
                  seed=0):
    """Evaluate every ``(rate, condition)`` pair with a dropout-defended victim.

    ``attacks`` maps condition names to an :class:`AttackArtifact` (or
    ``None`` for clean queries) and must contain ``"NoAttack"``. A rate of 0
    is always included as the undefended baseline. Rows are sorted by rate
    and keep the condition order of ``attacks``.
    """
    if BASELINE_CONDITION not in attacks:
        raise ConfigError(f"defense sweep needs a {BASELINE_CONDITION!r} condition")
    rates = [float(r) for r in rates]
    if not rates:
        raise ConfigError("defense sweep needs at least one rate")
    grid = sorted(set(rates) | {0.0})
    rows = []
    for rate in grid:
        view = apply_inference_dropout(model, DropoutDefenseConfig(rate=rate, passes=passes,
                                                                   seed=seed))
        for name, artifact in attacks.items():
            override = None if artifact is None else artifact.perturbed
            report = evaluate_reid(view, bundle, protocol, query_override=override)
            rows.append({"rate": rate, "condition": name, **report.metrics()})
    return rows


def write_sweep_csv(rows, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow([repr(float(r["rate"])), r["condition"]]
                            + [f"{r[k]:.2f}" for k in SWEEP_COLUMNS[2:]])
    return path


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        return [{"rate": float(r["rate"]), "condition": r["condition"],
                 **{k: float(r[k]) for k in SWEEP_COLUMNS[2:]}} for r in csv.DictReader(fh)]
