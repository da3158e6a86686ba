"""Deep Mis-Ranking: a learned, masked perturbation generator that corrupts retrieval rankings."""
from .attacker import (DEFAULT_SCALE, DeepMisRanking, MisrankSchedule, attack_query_set_dmr,
                       generate_adversarial, train_misranking_attacker)
from .losses import (MisrankLossWeights, least_likely_target, loss_adv_etri, loss_adv_xent,
                     loss_gan, loss_vp)
from .mask import HARD_INFER, SOFT_TRAIN, MaskConfig, gumbel_mask
from .msssim import MsSsimConfig, max_levels, ms_ssim, ms_ssim_torch
from .nets import DiscriminatorSet, GeneratorNet

__all__ = [
    "DEFAULT_SCALE", "DeepMisRanking", "MisrankSchedule", "attack_query_set_dmr", "generate_adversarial",
    "train_misranking_attacker", "MisrankLossWeights", "least_likely_target", "loss_adv_etri",
    "loss_adv_xent", "loss_gan", "loss_vp", "HARD_INFER", "SOFT_TRAIN", "MaskConfig",
    "gumbel_mask", "MsSsimConfig", "max_levels", "ms_ssim", "ms_ssim_torch", "DiscriminatorSet",
    "GeneratorNet",
]
