"""Training and applying the mis-ranking perturbation generator."""
import csv
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .._rng import philox
from ..artifacts import AttackArtifact
from ..checkpoint import load_container, save_container
from ..exceptions import BatchCompositionError, CheckpointError, ConfigError, TrainingError
from ..model import normalize_embeddings
from ..validation import as_image_batch
from .losses import (MisrankLossWeights, loss_adv_etri, loss_adv_xent_logits, loss_gan,
                     loss_gan_generator, loss_vp)
from .mask import HARD_INFER, SOFT_TRAIN, MaskConfig, gumbel_mask
from .msssim import MsSsimConfig
from .nets import DTYPE, DiscriminatorSet, GeneratorNet, build

HISTORY_COLUMNS = ("step", "L_GAN_D", "L_GAN_G", "L_etri", "L_xent", "L_VP", "total")
INFER_NOISE_KEY = "infer"


# 8/255 with half the pixels masked barely moves Rank-1 on the synthetic set;
# 32/255 with every pixel active drives it to chance level at MS-SSIM ~0.9
DEFAULT_SCALE = 32 / 255


@dataclass(frozen=True)
class MisrankSchedule:
    epochs: int = 20
    ids_per_batch: int = 4
    samples_per_id: int = 4
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-3
    lr_mask: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.ids_per_batch < 2 or self.samples_per_id < 2:
            raise ConfigError("batches need >= 2 identities with >= 2 samples each")


def _identity_batches(labels, ids_per_batch, samples_per_id, rng):
    """One epoch of P x K batches (identities shuffled, K samples each) covering ~all images."""
    by_id = {}
    for i, lab in enumerate(labels):
        by_id.setdefault(int(lab), []).append(i)
    ids = np.array(sorted(by_id))
    if len(ids) < 2:
        raise BatchCompositionError("attacker training needs >= 2 identities")
    per_batch = min(ids_per_batch, len(ids))
    num_batches = max(1, -(-len(labels) // (per_batch * samples_per_id)))
    batches = []
    while len(batches) < num_batches:
        order = ids[rng.permutation(len(ids))]
        for start in range(0, len(order) - per_batch + 1, per_batch):
            batch = []
            for pid in order[start:start + per_batch]:
                pool = by_id[int(pid)]
                replace = len(pool) < samples_per_id
                batch.extend(rng.choice(pool, size=samples_per_id, replace=replace).tolist())
            batches.append(batch)
    return batches[:num_batches]


class DeepMisRanking(TransformerMixin, BaseEstimator):
    """Learned mis-ranking attack against a frozen :class:`~reidattack.model.ReIDVictim`.

    ``fit(X, y)`` trains the generator, discriminators and pixel mask on
    training images; ``transform(X)`` returns attacked images
    ``clip(X + scale * G(X) * mask, 0, 1)`` with the hard inference mask.
    """

    def __init__(self, victim=None, scale=DEFAULT_SCALE, active_pixel_fraction=1.0, temperature=1.0,
                 w_gan=1.0, w_etri=1.0, w_xent=1.0, w_vp=1.0, delta_margin=0.3, smoothing=0.1,
                 epochs=20, ids_per_batch=4, samples_per_id=4, lr_generator=1e-3,
                 lr_discriminator=1e-3, lr_mask=1e-2, generator_channels=(16, 32, 64),
                 discriminator_width=16, seed=0):
        self.victim = victim
        self.scale = scale
        self.active_pixel_fraction = active_pixel_fraction
        self.temperature = temperature
        self.w_gan = w_gan
        self.w_etri = w_etri
        self.w_xent = w_xent
        self.w_vp = w_vp
        self.delta_margin = delta_margin
        self.smoothing = smoothing
        self.epochs = epochs
        self.ids_per_batch = ids_per_batch
        self.samples_per_id = samples_per_id
        self.lr_generator = lr_generator
        self.lr_discriminator = lr_discriminator
        self.lr_mask = lr_mask
        self.generator_channels = generator_channels
        self.discriminator_width = discriminator_width
        self.seed = seed

    # -- configuration views ----------------------------------------------

    @property
    def mask_config(self):
        return MaskConfig(self.active_pixel_fraction, self.temperature, self.seed)

    @property
    def loss_weights(self):
        return MisrankLossWeights(self.w_gan, self.w_etri, self.w_xent, self.w_vp,
                                  self.delta_margin, self.smoothing)

    @property
    def schedule(self):
        return MisrankSchedule(self.epochs, self.ids_per_batch, self.samples_per_id,
                               self.lr_generator, self.lr_discriminator, self.lr_mask, self.seed)

    def _check_params(self):
        if self.victim is None:
            raise ConfigError("DeepMisRanking needs a fitted victim")
        check_is_fitted(self.victim, "net_")
        if not 0 < self.scale <= 1:
            raise ConfigError(f"perturbation scale must lie in (0, 1], got {self.scale}")
        # constructing the config views validates them
        _ = (self.mask_config, self.loss_weights, self.schedule)

    # -- core ops -----------------------------------------------------------

    def _perturb(self, x, mask):
        raw = self.generator_(x.to(DTYPE)).to(x.dtype)
        p = self.scale * raw * mask.to(x.dtype)
        return p, (x + p).clamp(0.0, 1.0)

    def fit(self, X, y):
        self._check_params()
        victim = self.victim
        X = as_image_batch(X, image_shape=victim.image_shape_)
        y = np.asarray(y)
        dense = np.searchsorted(victim.classes_, y)
        if np.any(dense >= len(victim.classes_)) or np.any(victim.classes_[np.minimum(
                dense, len(victim.classes_) - 1)] != y):
            raise ConfigError("attacker training labels must be identities the victim was trained on")
        weights, sched = self.loss_weights, self.schedule
        h, w = victim.image_shape_
        self.image_shape_ = (h, w)
        self.msssim_config_ = MsSsimConfig().resolve((h, w))
        self.generator_ = build(GeneratorNet, self.seed, "generator",
                                channels=tuple(self.generator_channels))
        self.discriminators_ = build(DiscriminatorSet, self.seed, "discriminators",
                                     width=self.discriminator_width)
        self.mask_logits_ = torch.zeros((h, w), dtype=torch.float64, requires_grad=True)
        self.victim_checksum_ = victim.parameter_checksum()

        opt_g = torch.optim.Adam(list(self.generator_.parameters()), lr=sched.lr_generator,
                                 betas=(0.5, 0.999))
        opt_m = torch.optim.Adam([self.mask_logits_], lr=sched.lr_mask, betas=(0.5, 0.999))
        opt_d = torch.optim.Adam(self.discriminators_.parameters(), lr=sched.lr_discriminator,
                                 betas=(0.5, 0.999))
        net = victim.net_
        xt = torch.as_tensor(X, dtype=DTYPE)
        rng = philox(self.seed, "misrank-batches")
        history, step = [], 0
        for epoch in range(sched.epochs):
            for batch in _identity_batches(dense, sched.ids_per_batch, sched.samples_per_id, rng):
                x = xt[batch]
                labels = dense[batch]
                mask = gumbel_mask(self.mask_logits_, self.mask_config, SOFT_TRAIN,
                                   noise_key=("train", step))
                _, x_adv = self._perturb(x, mask)

                # discriminator ascends the GAN objective
                xd = x.to(DTYPE)
                real = self.discriminators_(xd, xd)
                fake = self.discriminators_(xd, x_adv.detach().to(DTYPE))
                d_obj = loss_gan(real, fake)
                opt_d.zero_grad()
                (-d_obj).backward()
                opt_d.step()

                # generator and mask descend the attack objective
                emb_adv, logits_adv = net(x_adv)
                with torch.no_grad():
                    _, logits_clean = net(x)
                g_gan = loss_gan_generator(self.discriminators_(xd, x_adv.to(DTYPE)))
                etri = loss_adv_etri(normalize_embeddings(emb_adv), labels, weights.delta_margin)
                xent = loss_adv_xent_logits(logits_adv, logits_clean, labels, weights.smoothing)
                vp = loss_vp(x, x_adv, self.msssim_config_)
                total = (weights.w_gan * g_gan + weights.w_etri * etri
                         + weights.w_xent * xent + weights.w_vp * vp)
                parts = {"L_GAN_D": d_obj, "L_GAN_G": g_gan, "L_etri": etri, "L_xent": xent,
                         "L_VP": vp, "total": total}
                if not all(torch.isfinite(v) for v in parts.values()):
                    raise TrainingError(f"non-finite attacker loss at step {step} (epoch {epoch}): "
                                        + ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items()))
                opt_g.zero_grad()
                opt_m.zero_grad()
                total.backward()
                opt_g.step()
                opt_m.step()
                history.append({"step": step, **{k: float(v.detach()) for k, v in parts.items()}})
                step += 1
        for module in (self.generator_, self.discriminators_):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
        self.mask_logits_ = self.mask_logits_.detach()
        self.history_ = history
        if victim.parameter_checksum() != self.victim_checksum_:
            raise TrainingError("victim parameters changed during attacker training")
        return self

    def inference_mask(self):
        check_is_fitted(self, "generator_")
        return gumbel_mask(self.mask_logits_, self.mask_config, HARD_INFER,
                           noise_key=INFER_NOISE_KEY)

    def generate(self, X, mask=None):
        """Return ``(P, X_adv)`` for a batch; ``mask`` overrides the hard inference mask."""
        check_is_fitted(self, "generator_")
        X = as_image_batch(X, image_shape=self.image_shape_)
        m = self.inference_mask() if mask is None else torch.as_tensor(
            np.asarray(mask, dtype=np.float64))
        if tuple(m.shape) != self.image_shape_:
            raise ConfigError(f"mask shape {tuple(m.shape)} does not match image {self.image_shape_}")
        with torch.no_grad():
            p, adv = self._perturb(torch.as_tensor(X, dtype=DTYPE), m)
        return p.numpy(), adv.numpy()

    def transform(self, X):
        return self.generate(X)[1]

    # -- persistence --------------------------------------------------------

    def write_history(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for row in self.history_:
                writer.writerow([row["step"]] + [repr(row[c]) for c in HISTORY_COLUMNS[1:]])

    def save(self, path):
        check_is_fitted(self, "generator_")
        arrays = {f"generator.{k}": v.numpy() for k, v in self.generator_.state_dict().items()}
        arrays.update({f"discriminators.{k}": v.numpy()
                       for k, v in self.discriminators_.state_dict().items()})
        arrays["mask_logits"] = self.mask_logits_.numpy()
        params = {k: v for k, v in self.get_params(deep=False).items() if k != "victim"}
        params["generator_channels"] = list(params["generator_channels"])
        meta = {
            "params": params,
            "image_shape": list(self.image_shape_),
            "mask_config": asdict(self.mask_config),
            "loss_weights": asdict(self.loss_weights),
            "victim_checksum": self.victim_checksum_,
            "history": self.history_,
        }
        return save_container(path, "misrank_attacker", meta, arrays)

    @classmethod
    def load(cls, path, victim):
        meta, arrays, _ = load_container(path, kind="misrank_attacker")
        if victim.parameter_checksum() != meta["victim_checksum"]:
            raise CheckpointError(f"{path} was trained against a different victim "
                                  f"(checksum {meta['victim_checksum'][:16]}...)")
        params = dict(meta["params"])
        params["generator_channels"] = tuple(params["generator_channels"])
        model = cls(victim=victim, **params)
        model.image_shape_ = tuple(meta["image_shape"])
        model.msssim_config_ = MsSsimConfig().resolve(model.image_shape_)
        model.generator_ = build(GeneratorNet, model.seed, "generator",
                                 channels=model.generator_channels)
        model.discriminators_ = build(DiscriminatorSet, model.seed, "discriminators",
                                      width=model.discriminator_width)
        for prefix, module in (("generator.", model.generator_),
                               ("discriminators.", model.discriminators_)):
            state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items()
                     if k.startswith(prefix)}
            module.load_state_dict(state)
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
        model.mask_logits_ = torch.from_numpy(arrays["mask_logits"])
        model.victim_checksum_ = meta["victim_checksum"]
        model.history_ = meta["history"]
        return model


# -- functional surface -----------------------------------------------------


def generate_adversarial(attacker, mask_config, image, mask=None):
    """``(P, I_hat)`` for one image. ``mask_config`` must match the attacker's."""
    if mask_config != attacker.mask_config:
        raise ConfigError("mask_config differs from the one the attacker was trained with")
    p, adv = attacker.generate(np.asarray(image)[None], mask=mask)
    return p[0], adv[0]


def train_misranking_attacker(victim, train_images, train_labels, weights=MisrankLossWeights(),
                              mask_config=MaskConfig(), schedule=MisrankSchedule(), scale=DEFAULT_SCALE,
                              **kwargs):
    attacker = DeepMisRanking(
        victim=victim, scale=scale, active_pixel_fraction=mask_config.active_pixel_fraction,
        temperature=mask_config.temperature, w_gan=weights.w_gan, w_etri=weights.w_etri,
        w_xent=weights.w_xent, w_vp=weights.w_vp, delta_margin=weights.delta_margin,
        smoothing=weights.smoothing, epochs=schedule.epochs, ids_per_batch=schedule.ids_per_batch,
        samples_per_id=schedule.samples_per_id, lr_generator=schedule.lr_generator,
        lr_discriminator=schedule.lr_discriminator, lr_mask=schedule.lr_mask,
        seed=schedule.seed, **kwargs)
    return attacker.fit(train_images, train_labels)


def attack_query_set_dmr(attacker, bundle, images=None):
    """Apply the trained generator to every query image (or to ``images``, aligned with the queries)."""
    clean = bundle.images("query")
    source = clean if images is None else np.asarray(images, dtype=np.float64)
    perturbation, adv = attacker.generate(source)
    traces = [{"mask_active_pixels": int(attacker.inference_mask().sum())} for _ in range(len(adv))]
    return AttackArtifact.build("dmr", bundle.sample_ids("query"), clean, adv, traces=traces,
                                meta={"scale": attacker.scale,
                                      "active_pixel_fraction": attacker.active_pixel_fraction,
                                      "victim_checksum": attacker.victim_checksum_},
                                msssim_config=attacker.msssim_config_)

