"""Adversarial robustness evaluation for deep hashing retrieval with pharos codes."""
from .attack import (AdvBatch, AdvResult, AttackConfig, attack_hag, attack_targeted, loss_pga, loss_pga_dagger,
                     loss_weighted, pgd_attack, pgd_attack_batch)
from .data import Dataset, gen_synthetic, load_dataset, save_dataset
from .errors import (ConfigError, DimensionError, FormatError, GuardError, InvalidInputError, NumericalError,
                     PharosError)
from .hashcore import CodeTable, HashCode, hamming, hamming_rows, inner, inner_rows, negate, sign_quantize
from .model import HashNet, TrainConfig, adv_train, encode, forward, input_gradient, train_pairwise
from .retrieval import Index, average_precision, map_at_n, p_at_topn, pr_curve, rank
from .semantics import (PharosCode, WeightedPool, anchor_code, dice_similarity, pair_weights, partition_pool,
                        pgm_pharos, pharos_batch, pharos_bruteforce, psi_objective, weighted_pool)

__version__ = "0.1.0"
