#!/usr/bin/env python3
"""Train small conditional models both ways and compare them.

A scaled-down version of the headline experiment: maximum likelihood on
the ground-truth pairs versus the reward-matched surrogate on pre-sampled
matched pairs, evaluated by sampling expressions for held-out targets.
Runs in a few minutes on a laptop core; the full desk-scale study lives in
tests/_desk.py.
"""

import numpy as np

from rewardmatch.dataset import build_dataset
from rewardmatch.grammar import load_default_grammar
from rewardmatch.metrics import conditional_eval_scalar
from rewardmatch.model import ModelConfig
from rewardmatch.reward import RewardSpec, build_match_index
from rewardmatch.training import TrainConfig, train_ml, train_surrogate

splits = build_dataset(load_default_grammar(), 15_000, (400, 400), seed=11)
model_cfg = ModelConfig(vocab_size=len(splits.vocabulary), embed_dim=32,
                        cond_dim=1, hidden_dim=64, num_layers=2, max_len=32)
print(f"dataset: {len(splits.train)} train pairs; "
      f"model: {model_cfg.hidden_dim}x{model_cfg.num_layers}")

print("\nTraining with maximum likelihood ...")
ml_cfg = TrainConfig(objective="ml", batch_size=64, max_epochs=4, seed=1,
                     val_targets=200)
ml = train_ml(splits, model_cfg, ml_cfg)
for epoch, loss, metric in ml.history:
    print(f"  epoch {epoch}: train loss {loss:.3f}, "
          f"val decode error {metric.property_error:.1f}")

print("\nTraining the reward-matched surrogate (K=5 matches per target) ...")
index = build_match_index(train_values=[ex.y_raw for ex in splits.train],
                          spec=RewardSpec())
sur_cfg = TrainConfig(objective="surrogate", batch_size=64, max_epochs=1,
                      samples_per_target=5, seed=1, val_targets=200)
sur = train_surrogate(splits, index, model_cfg, sur_cfg)
for epoch, loss, metric in sur.history:
    print(f"  epoch {epoch}: train loss {loss:.3f}, "
          f"val decode error {metric.property_error:.1f}")

train_strings = {ex.expr for ex in splits.train}
print("\nSampling 10 expressions per held-out target (200 targets) ...")
for name, result in (("ml", ml), ("surrogate", sur)):
    report = conditional_eval_scalar(result.model, splits.test[:200],
                                     splits.vocabulary, train_strings,
                                     S=10, repeats=1,
                                     rng=np.random.default_rng(5))
    print(f"  {name:10s} validity {report.validity:.3f}  "
          f"mae {report.mae:7.2f}  within-3 {report.within_3_accuracy:.3f}  "
          f"nll/token {report.test_nll_per_token:.3f}")

y = 123
model = sur.model
print(f"\nSurrogate model samples conditioned on y = {y}:")
conds = np.full((8, 1), y / 1000.0)
for tokens in model.sample_batch(conds, np.random.default_rng(2)):
    s = splits.vocabulary.decode_generated(tokens)
    if s is None:
        print("  <truncated sample>")
        continue
    from rewardmatch.evaluator import eval_expr
    outcome = eval_expr(s)
    print(f"  {s:32s} -> {outcome.value if outcome.ok else 'invalid'}")
