"""Conditional discrete-sequence generation by reward-matched likelihood.

Train autoregressive models that generate structures matching target
properties by maximizing likelihood under a reward-matched sampling
distribution instead of score-function policy gradients.  The reference
task generates python-style integer expressions evaluating to a target
value.
"""

from .grammar import (DerivationBudget, GrammarError, Pcfg,
                      load_default_grammar, parse_pcfg, sample_derivation)
from .evaluator import (EvalOutcome, PropertyOracle, ScalarValueOracle,
                        StandardizedVectorOracle, eval_expr,
                        expression_properties, is_valid)
from .dataset import (DatasetSplits, LabeledExample, Vocabulary,
                      build_dataset, dataset_hash, load_splits, write_splits)
from .reward import (MatchIndex, NormalizedRewardTable, RewardSpec,
                     build_match_index, normalize_over_set,
                     presample_training_pairs, reward_l1, reward_scalar,
                     sample_matches_scalar)
from .model import ConditionalLSTM, ModelConfig
from .entropy import (entropy_bench, entropy_decomposed_B, entropy_exact_enum,
                      entropy_greedy, entropy_mc_A, entropy_straight_through)
from .training import (TrainConfig, TrainResult, early_stop, train_ml,
                       train_raml_is, train_reinforce, train_surrogate,
                       train_surrogate_entropy)
from .augmentation import (AugmentConfig, augment_classic, augment_raml,
                           edit_sensitivity_study, perturb,
                           sample_edit_distance)
from .metrics import (EvalReport, conditional_eval_scalar,
                      conditional_eval_vector, generation_metrics)

__version__ = "0.1.0"
