#!/usr/bin/env python3
"""Compare the sequence-entropy estimators on an enumerable model.

On a model small enough to enumerate every sequence, the exact entropy is
computable, so the Monte Carlo estimator (full trajectories), the
decomposed estimator (closed-form per-step entropies along sampled
prefixes), the greedy-prefix estimator, and the straight-through variant
can all be judged against the truth.  The decomposed estimator's lower
variance is what makes it usable; the greedy variant is the differentiable
one the entropy regularizer trains with.
"""

import numpy as np

from rewardmatch.entropy import (entropy_bench, entropy_decomposed_B,
                                 entropy_exact_enum, entropy_greedy,
                                 entropy_mc_A, entropy_straight_through)
from rewardmatch.model import ConditionalLSTM, ModelConfig, pad_batch
from rewardmatch.neural import adam_step

# fit a tiny model so the distribution has structure
cfg = ModelConfig(vocab_size=5, embed_dim=3, cond_dim=1, hidden_dim=8,
                  num_layers=1, max_len=6)
model = ConditionalLSTM(cfg, rng=np.random.default_rng(0))
seqs = [np.array([1, 3, 4, 2]), np.array([1, 3, 2]),
        np.array([1, 4, 4, 3, 2]), np.array([1, 4, 2])]
conds = np.array([[0.5], [0.5], [-0.5], [-0.5]])
padded, lengths = pad_batch(seqs, pad_id=0)
for _ in range(150):
    model.params.zero_grads()
    model.training_step(padded, lengths, conds)
    adam_step(model.params, lr=0.01)

cond = np.array([0.3])
exact = entropy_exact_enum(model, cond)
print(f"exact entropy (full enumeration): {exact:.4f} nats")

rng = np.random.default_rng(1)
print("\nestimates:")
print(f"  monte carlo   S=100 : {entropy_mc_A(model, cond, 100, rng).value:.4f}")
print(f"  decomposed    S=100 : {entropy_decomposed_B(model, cond, 100, rng).value:.4f}")
print(f"  greedy prefix       : {entropy_greedy(model, cond).value:.4f}")
print(f"  straight-through    : {entropy_straight_through(model, cond).value:.4f}")

print("\nspread over 15 trials at matched sample sizes:")
rows, summary = entropy_bench(model, cond, estimators=("mc_A", "decomposed_B"),
                              trials=15, sample_sizes=(1, 10, 50),
                              rng=np.random.default_rng(2))
for key in sorted(summary):
    s = summary[key]
    print(f"  {key:22s} mean {s['mean']:.4f}  std {s['std']:.4f}")
print("\nthe decomposed estimator is the steadier one at every sample size,")
print("which is why its greedy variant serves as the training regularizer.")
