"""Private FGSM: targeted iterative sign-gradient attack with an irreversible target.

The target class is drawn uniformly from the classes whose preceding
cumulative probability (in descending order) already exceeds ``sigma``, so
neither the predicted class nor any class close to it can be chosen. The
image is then pushed towards that target with fixed-size sign steps.

For re-identification the classifier head only knows training identities,
so the "protected class" of a query is its predicted training identity.
"""
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import derive_seed, philox
from .artifacts import AttackArtifact
from .exceptions import ConfigError, SelectionError
from .model import LossSpec
from .validation import as_image_batch

# images are attacked in fixed chunks so results never depend on n_jobs
CHUNK_SIZE = 32


@dataclass(frozen=True)
class PfgsmConfig:
    epsilon: float = 4 / 255
    sigma: float = 0.9
    max_iterations: int = 50
    stop_on_success: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon <= 0.25:
            raise ConfigError(f"epsilon must lie in (0, 0.25], got {self.epsilon}")
        if not 0 <= self.sigma < 1:
            raise ConfigError(f"sigma must lie in [0, 1), got {self.sigma}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be an integer >= 1, got {self.max_iterations}")


@dataclass(frozen=True)
class TargetSelection:
    target_class: int
    candidate_set: tuple
    sorted_probs: np.ndarray = field(repr=False)
    order: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PfgsmTrace:
    target_class: int
    iterations_used: int
    final_predicted_class: int
    success: bool
    linf_budget_used: float
    target_prob_before: float
    target_prob_after: float

    def as_record(self):
        return {"target": self.target_class, "iterations": self.iterations_used,
                "final_pred": self.final_predicted_class, "success": self.success,
                "budget_used": self.linf_budget_used,
                "target_prob_before": self.target_prob_before,
                "target_prob_after": self.target_prob_after}


def _check_probs(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ConfigError(f"probability vector must be 1-D with >= 2 entries, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or p.min() < 0 or abs(p.sum() - 1) > 1e-6:
        raise ConfigError("probability vector must be finite, non-negative and sum to 1")
    return p


def candidate_classes(p, sigma):
    """Classes whose preceding prefix sum in descending order exceeds ``sigma``.

    Returns ``(candidates, sorted_probs, order)``; ties in probability keep
    the original class order.
    """
    p = _check_probs(p)
    if not 0 <= sigma < 1:
        raise ConfigError(f"sigma must lie in [0, 1), got {sigma}")
    order = np.argsort(-p, kind="stable")
    sorted_p = p[order]
    before = np.concatenate([[0.0], np.cumsum(sorted_p)[:-1]])
    return tuple(int(c) for c in order[before > sigma]), sorted_p, order


def select_target_class(p, sigma, rng):
    """Draw the target class uniformly from the irreversible candidate set."""
    candidates, sorted_p, order = candidate_classes(p, sigma)
    if not candidates:
        best = float(sorted_p[:-1].sum())
        raise SelectionError(f"no class is reachable past sigma={sigma}: the largest prefix sum "
                             f"before any class is {best:.6g}")
    target = candidates[int(rng.integers(len(candidates)))]
    return TargetSelection(target_class=target, candidate_set=candidates, sorted_probs=sorted_p,
                           order=order)


def _attack_chunk(model, x0, targets, config):
    """Run the iterations for one chunk; every image keeps its own stopping point."""
    x = x0.copy()
    n = len(x)
    active = np.ones(n, dtype=bool)
    used = np.zeros(n, dtype=np.int64)
    loss = LossSpec.to_class(targets)
    for _ in range(config.max_iterations):
        if not active.any():
            break
        # the whole chunk is differentiated every step so the arithmetic is the
        # same whatever subset is still active
        grad = model.input_gradient(x, loss)
        step = np.clip(x - config.epsilon * np.sign(grad), 0.0, 1.0)
        x[active] = step[active]
        used[active] += 1
        if config.stop_on_success:
            pred = model.decision_function(x).argmax(axis=1)
            active &= pred != targets
    return x, used


def pfgsm_attack(model, images, config=PfgsmConfig(), keys=None, n_jobs=None):
    """Attack a batch of images.

    ``keys`` (one per image, default the row index) feed the per-image target
    draw, so an image's result does not depend on its neighbours or on
    ``n_jobs``. Returns ``(protected_images, traces)``.
    """
    X = as_image_batch(images, image_shape=model.image_shape_)
    keys = list(range(len(X))) if keys is None else list(keys)
    if len(keys) != len(X):
        raise ConfigError(f"got {len(keys)} keys for {len(X)} images")
    probs = model.predict_proba(X)
    targets = np.array([select_target_class(p, config.sigma,
                                            philox(config.seed, "pfgsm", k)).target_class
                        for p, k in zip(probs, keys)], dtype=np.int64)
    chunks = [slice(s, s + CHUNK_SIZE) for s in range(0, len(X), CHUNK_SIZE)]
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_attack_chunk)(model, X[c], targets[c], config) for c in chunks)
    adv = np.concatenate([r[0] for r in results]) if results else X.copy()
    used = np.concatenate([r[1] for r in results]) if results else np.zeros(0, np.int64)
    after = model.predict_proba(adv)
    pred = after.argmax(axis=1)
    budget = np.abs(adv - X).reshape(len(X), -1).max(axis=1) if len(X) else np.zeros(0)
    rows = np.arange(len(X))
    traces = [PfgsmTrace(target_class=int(targets[i]), iterations_used=int(used[i]),
                         final_predicted_class=int(pred[i]), success=bool(pred[i] == targets[i]),
                         linf_budget_used=float(budget[i]),
                         target_prob_before=float(probs[i, targets[i]]),
                         target_prob_after=float(after[i, targets[i]])) for i in rows]
    return adv, traces


def attack_query_set_pfgsm(model, bundle, config=PfgsmConfig(), n_jobs=None, images=None):
    """P-FGSM on every query image (or on ``images``, aligned with the queries).

    Per-image randomness is keyed by ``sample_id``. Norms and MS-SSIM are
    measured against the clean queries.
    """
    clean = bundle.images("query")
    source = clean if images is None else np.asarray(images, dtype=np.float64)
    ids = bundle.sample_ids("query")
    adv, traces = pfgsm_attack(model, source, config, keys=ids, n_jobs=n_jobs)
    classes = model.classes_
    records = [dict(t.as_record(), target_id=int(classes[t.target_class])) for t in traces]
    meta = {"epsilon": config.epsilon, "sigma": config.sigma,
            "max_iterations": config.max_iterations, "stop_on_success": config.stop_on_success,
            "seed": config.seed, "protected_class": "predicted train identity",
            "victim_checksum": model.parameter_checksum()}
    return AttackArtifact.build("pfgsm", ids, clean, adv, traces=records, meta=meta)


class PFGSM(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` binds a trained victim, ``transform`` attacks images.

    ``transform`` keys the per-image target draws by row index; use
    :func:`attack_query_set_pfgsm` for sample-id keyed, order-free results.
    """

    def __init__(self, victim=None, epsilon=4 / 255, sigma=0.9, max_iterations=50,
                 stop_on_success=True, seed=0, n_jobs=None):
        self.victim = victim
        self.epsilon = epsilon
        self.sigma = sigma
        self.max_iterations = max_iterations
        self.stop_on_success = stop_on_success
        self.seed = seed
        self.n_jobs = n_jobs

    @property
    def config(self):
        return PfgsmConfig(epsilon=self.epsilon, sigma=self.sigma,
                           max_iterations=self.max_iterations,
                           stop_on_success=self.stop_on_success, seed=self.seed)

    def fit(self, X=None, y=None):
        if self.victim is None:
            raise ConfigError("PFGSM needs a trained victim")
        check_is_fitted(self.victim, "net_")
        self.config_ = self.config
        self.victim_checksum_ = self.victim.parameter_checksum()
        return self

    def attack(self, X):
        check_is_fitted(self, "config_")
        return pfgsm_attack(self.victim, X, self.config_, n_jobs=self.n_jobs)

    def transform(self, X):
        return self.attack(X)[0]
