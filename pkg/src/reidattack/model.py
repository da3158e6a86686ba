"""The victim: an IDE-style embedder plus identity classifier.

``ReIDVictim`` follows the scikit-learn estimator protocol: ``fit(X, y)``
trains on images ``X`` of shape ``(n, 3, H, W)`` with identity labels ``y``;
``transform`` returns L2-normalised embeddings, ``predict_proba`` the softmax
over training identities. Everything runs in float64 on the CPU.
"""
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from ._rng import derive_seed, philox
from .checkpoint import load_container, save_container
from .exceptions import CheckpointError, ConfigError, NumericalError, TrainingError
from .validation import as_image_batch

DTYPE = torch.float64
INFERENCE_CHUNK = 256


class VictimNet(nn.Module):
    """conv -> GroupNorm -> SiLU -> avg-pool, three times; GAP; embedding; classifier.

    Smooth nonlinearity and average pooling keep the input gradient free of
    kinks so finite-difference checks are meaningful.
    """

    def __init__(self, image_shape, num_classes, channels=(16, 32, 64), embedding_dim=64,
                 input_channel_mask=None):
        super().__init__()
        self.image_shape = tuple(image_shape)
        blocks, c_in = [], 3
        for c in channels:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c, 3, padding=1),
                nn.GroupNorm(min(4, c), c),
                nn.SiLU(),
                nn.AvgPool2d(2, ceil_mode=True),
            ))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.embedding = nn.Linear(c_in, embedding_dim)
        self.classifier = nn.Linear(embedding_dim, num_classes)
        mask = torch.ones(3) if input_channel_mask is None else torch.as_tensor(
            input_channel_mask, dtype=torch.float64)
        self.register_buffer("input_mask", mask.view(1, 3, 1, 1))

    @property
    def num_hidden(self):
        return len(self.blocks) + 1

    def forward(self, x, hidden_hook=None):
        """Return ``(embedding, logits)``; ``hidden_hook(h, layer_index)`` sees every hidden output."""
        h = x * self.input_mask
        for i, block in enumerate(self.blocks):
            h = block(h)
            if hidden_hook is not None:
                h = hidden_hook(h, i)
        h = h.mean(dim=(2, 3))
        emb = self.embedding(h)
        if hidden_hook is not None:
            emb = hidden_hook(emb, len(self.blocks))
        return emb, self.classifier(emb)

    def activations(self, x):
        """Per-layer activations, for numerical diagnostics."""
        out = {}
        h = x * self.input_mask
        for i, block in enumerate(self.blocks):
            h = block(h)
            out[f"block{i}"] = h
        emb = self.embedding(h.mean(dim=(2, 3)))
        out["embedding"] = emb
        out["logits"] = self.classifier(emb)
        return out


def _augment(x, rng):
    """Per-image random translation (up to 2 px) and photometric jitter."""
    out = torch.empty_like(x)
    for i in range(len(x)):
        dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
        shifted = torch.roll(x[i], shifts=(dy, dx), dims=(1, 2))
        contrast = rng.uniform(0.85, 1.15)
        brightness = rng.uniform(-0.08, 0.08)
        out[i] = ((shifted - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0)
    return out


def normalize_embeddings(emb):
    return F.normalize(emb, p=2, dim=1, eps=1e-12)


def build_net(architecture_config, seed):
    """Construct a VictimNet with deterministic initial weights."""
    cfg = dict(architecture_config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "victim-init") >> 1)
        net = VictimNet(cfg["image_shape"], cfg["num_classes"], tuple(cfg["channels"]),
                        cfg["embedding_dim"], cfg.get("input_channel_mask"))
    return net.to(DTYPE).eval()


@dataclass(frozen=True)
class LossSpec:
    """Cross-entropy against a class index or a full target distribution."""

    kind: str
    target: object

    KINDS = ("cross_entropy_to_target_class", "cross_entropy_to_distribution")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {self.KINDS}")

    @classmethod
    def to_class(cls, index):
        return cls("cross_entropy_to_target_class", index)

    @classmethod
    def to_distribution(cls, probs):
        return cls("cross_entropy_to_distribution", np.asarray(probs, dtype=np.float64))

    def validate(self, num_classes):
        if self.kind == "cross_entropy_to_target_class":
            targets = np.atleast_1d(np.asarray(self.target))
            if targets.dtype.kind not in "iu" or targets.min() < 0 or targets.max() >= num_classes:
                raise ConfigError(f"target class {self.target} outside [0, {num_classes})")
        else:
            t = np.atleast_2d(self.target)
            if t.shape[-1] != num_classes or t.min() < 0 or np.abs(t.sum(-1) - 1).max() > 1e-6:
                raise ConfigError("target distribution must be a probability vector of length "
                                  f"{num_classes}")

    def __call__(self, logits):
        """Summed loss over the batch."""
        logp = F.log_softmax(logits, dim=1)
        n = logits.shape[0]
        if self.kind == "cross_entropy_to_target_class":
            idx = torch.as_tensor(np.broadcast_to(np.asarray(self.target), (n,)).copy(),
                                  dtype=torch.long)
            return -logp.gather(1, idx[:, None]).sum()
        t = torch.as_tensor(np.broadcast_to(self.target, logits.shape).copy(), dtype=logits.dtype)
        return -(t * logp).sum()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    embedding_dim: int = 64
    channels: tuple = field(default=(16, 32, 64))

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"TrainConfig.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"TrainConfig.batch_size must be >= 2, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"TrainConfig.learning_rate must be > 0, got {self.learning_rate}")


class ReIDVictim(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Desk-scale IDE victim trained with identity cross-entropy.

    Parameters
    ----------
    embedding_dim : int
        Length of the embedding returned by :meth:`transform`.
    channels : tuple of int
        Output channels of the three convolutional blocks.
    epochs, batch_size, learning_rate, momentum, weight_decay :
        SGD schedule.
    seed : int
        Controls initial weights and mini-batch order.
    input_channel_mask : sequence of 3 floats or None
        Diagnostic multiplier applied to the input channels.
    augment : bool
        Random shift and brightness/contrast jitter on training batches.
    """

    def __init__(self, embedding_dim=64, channels=(16, 32, 64), epochs=60, batch_size=16,
                 learning_rate=0.01, momentum=0.9, weight_decay=5e-4, seed=0,
                 input_channel_mask=None, augment=True):
        self.embedding_dim = embedding_dim
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed
        self.input_channel_mask = input_channel_mask
        self.augment = augment

    def _validate_params(self):
        TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                    learning_rate=self.learning_rate, seed=self.seed)

    def architecture_config(self, image_shape=None, num_classes=None):
        mask = self.input_channel_mask
        return {
            "image_shape": list(image_shape if image_shape is not None else self.image_shape_),
            "num_classes": int(num_classes if num_classes is not None else len(self.classes_)),
            "channels": [int(c) for c in self.channels],
            "embedding_dim": int(self.embedding_dim),
            "input_channel_mask": None if mask is None else [float(m) for m in mask],
        }

    def fit(self, X, y):
        self._validate_params()
        X = as_image_batch(X)
        y = np.asarray(y)
        if len(X) == 0:
            raise ConfigError("training set is empty")
        if len(y) != len(X):
            raise ConfigError(f"{len(X)} images but {len(y)} labels")
        self.classes_, dense = np.unique(y, return_inverse=True)
        self.image_shape_ = tuple(X.shape[2:])
        self.net_ = build_net(self.architecture_config(), self.seed)

        net = self.net_
        opt = torch.optim.SGD(net.parameters(), lr=self.learning_rate, momentum=self.momentum,
                              weight_decay=self.weight_decay)
        xt = torch.as_tensor(X, dtype=DTYPE)
        yt = torch.as_tensor(dense, dtype=torch.long)
        steps_per_epoch = max(1, -(-len(X) // self.batch_size))
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=self.epochs * steps_per_epoch)
        order_rng = philox(self.seed, "victim-batches")
        self.loss_history_ = []
        net.train()
        for epoch in range(self.epochs):
            perm = order_rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = torch.as_tensor(perm[start:start + self.batch_size])
                if len(idx) < 2:
                    continue
                xb = xt[idx]
                if self.augment:
                    xb = _augment(xb, order_rng)
                _, logits = net(xb)
                loss = F.cross_entropy(logits, yt[idx])
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(net.parameters(), 5.0)
                opt.step()
                sched.step()
                total += loss.item() * len(idx)
            self.loss_history_.append(total / len(X))
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return self

    # -- inference -----------------------------------------------------

    def _check_input(self, X):
        check_is_fitted(self, "net_")
        return as_image_batch(X, image_shape=self.image_shape_)

    def _forward(self, X, hidden_hook=None):
        X = self._check_input(X)
        embs, logits = [], []
        with torch.no_grad():
            for start in range(0, len(X), INFERENCE_CHUNK):
                e, lg = self.net_(torch.as_tensor(X[start:start + INFERENCE_CHUNK], dtype=DTYPE),
                                  hidden_hook)
                embs.append(e)
                logits.append(lg)
        return torch.cat(embs), torch.cat(logits)

    def decision_function(self, X):
        """Logits over training identities."""
        return self._forward(X)[1].numpy()

    def predict_proba(self, X):
        return torch.softmax(self._forward(X)[1], dim=1).numpy()

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X):
        """L2-normalised embeddings, shape ``(n, embedding_dim)``."""
        return normalize_embeddings(self._forward(X)[0]).numpy()

    def input_gradient(self, X, loss):
        """Gradient of ``loss`` (a :class:`LossSpec`) w.r.t. the input images, weights fixed."""
        X = self._check_input(X)
        loss.validate(len(self.classes_))
        x = torch.as_tensor(X, dtype=DTYPE).clone().requires_grad_(True)
        _, logits = self.net_(x)
        value = loss(logits)
        (grad,) = torch.autograd.grad(value, x)
        if not torch.all(torch.isfinite(grad)):
            with torch.no_grad():
                acts = self.net_.activations(torch.as_tensor(X, dtype=DTYPE))
            diag = {k: bool(torch.all(torch.isfinite(v))) for k, v in acts.items()}
            raise NumericalError(f"non-finite input gradient; finite activations per layer: {diag}")
        return grad.numpy()

    def parameter_arrays(self):
        check_is_fitted(self, "net_")
        return {k: v.detach().numpy().copy() for k, v in self.net_.state_dict().items()}

    def parameter_checksum(self):
        h = hashlib.sha256()
        for name, arr in sorted(self.parameter_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # -- persistence ---------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "net_")
        meta = {
            "architecture_config": self.architecture_config(),
            "params": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in self.get_params().items()},
            "classes": [int(c) for c in self.classes_],
            "loss_history": [float(v) for v in getattr(self, "loss_history_", [])],
        }
        return save_container(path, "victim", meta, self.parameter_arrays())

    @classmethod
    def load(cls, path, architecture_config=None):
        meta, arrays, _ = load_container(path, kind="victim")
        stored = meta["architecture_config"]
        if architecture_config is not None:
            expected = dict(architecture_config)
            diffs = {k: (expected.get(k), stored.get(k)) for k in set(expected) | set(stored)
                     if _norm(expected.get(k)) != _norm(stored.get(k))}
            if diffs:
                raise CheckpointError(f"architecture mismatch for {path}: "
                                      + ", ".join(f"{k}: expected {e}, stored {s}"
                                                  for k, (e, s) in sorted(diffs.items())))
        params = dict(meta["params"])
        params["channels"] = tuple(params["channels"])
        model = cls(**params)
        model.classes_ = np.asarray(meta["classes"], dtype=np.int64)
        model.image_shape_ = tuple(stored["image_shape"])
        model.net_ = build_net(stored, model.seed)
        state = {k: torch.from_numpy(v) for k, v in arrays.items()}
        try:
            model.net_.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"parameters in {path} do not fit the architecture: {exc}") from exc
        for p in model.net_.parameters():
            p.requires_grad_(False)
        model.loss_history_ = list(meta.get("loss_history", []))
        return model


def _norm(value):
    if isinstance(value, (list, tuple)):
        return [_norm(v) for v in value]
    return value


# -- functional surface ---------------------------------------------------


def train_reid_model(train_set, config=TrainConfig()):
    """Fit a :class:`ReIDVictim` on a list of train ``PersonSample``."""
    if not train_set:
        raise ConfigError("train_set is empty")
    X = np.stack([s.image for s in train_set])
    y = np.array([s.person_id for s in train_set])
    model = ReIDVictim(embedding_dim=config.embedding_dim, channels=tuple(config.channels),
                       epochs=config.epochs, batch_size=config.batch_size,
                       learning_rate=config.learning_rate, momentum=config.momentum,
                       weight_decay=config.weight_decay, seed=config.seed)
    return model.fit(X, y)


def embed(model, image):
    return model.transform(np.asarray(image)[None])[0]


def classify(model, image):
    return model.predict_proba(np.asarray(image)[None])[0]


def input_gradient(model, image, loss):
    return model.input_gradient(np.asarray(image)[None], loss)[0]


def checkpoint_roundtrip(model, path):
    model.save(path)
    return ReIDVictim.load(path, architecture_config=model.architecture_config())
