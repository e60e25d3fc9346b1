"""Discriminator-as-generator training: one robust classifier whose energies
are shaped so that bounded PGD on them produces class-conditional samples.
"""

from .analysis import (ExpansionRow, compare_sampling_strategies, verify_first_order_expansion,
                       verify_gradient_decomposition)
from .attacks import (AttackSpec, Trajectory, attack_hash, objective_values,
                      pgd_classification_attack, pgd_energy_sample, run_attack, sgld_sample,
                      uniform_ce_attack)
from .data import (AugmentationPolicy, BatchStream, DatasetHandle, DualStream, apply_policy,
                   derive_seed, load_dataset, parse_policy, sample_labels)
from .energy import conditional_probs, joint_energy, marginal_energy
from .errors import (CheckpointError, ConfigError, DatError, DomainError, NormModeError,
                     PlanError, TrainingDivergence, UnsupportedOperation)
from .metrics import (GaussianSummary, IdentityFlatten, MetricReport, TrainedProbe, accuracy,
                      counterfactual_fid, ece, fid, fid_from_features, inception_score,
                      ood_auroc, ood_scores, robust_accuracy, train_probe, write_reports)
from .models import (BATCH_STATS, FROZEN_STATS, ConvEnergyModel, EmaShadow, EnergyModel,
                     MLPEnergyModel, build_model, input_gradient, load_checkpoint,
                     save_checkpoint, set_norm_mode)
from .objectives import (LossTermWeights, PreparedBatch, ScaleFactors, at_ce_loss,
                         bce_generative_loss, combined_loss, r1_penalty, ratio_loss,
                         reference_ebm_gradient, scale_factors, scaled_ebm_gradient)
from .training import (CheckpointRecord, OptimizerSpec, Stage1Result, Stage1Trainer,
                       Stage2Trainer, StagePlan, plan_hash, run_stage1, run_stage2,
                       select_checkpoint)

__version__ = "0.1.0"
