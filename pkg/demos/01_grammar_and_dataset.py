#!/usr/bin/env python3
"""Sample the bundled integer-expression grammar and build a small dataset.

Walks the first pipeline stage end to end: parse the grammar, draw a few
derivations, evaluate them, then run the full sample/filter/dedup/split
pipeline and look at what comes out.
"""

import random

from rewardmatch.dataset import build_dataset
from rewardmatch.evaluator import eval_expr
from rewardmatch.grammar import (DerivationBudget, load_default_grammar,
                                 sample_derivation)

grammar = load_default_grammar()
print("nonterminals:", sorted(grammar.nonterminals))
print("start symbol:", grammar.start_symbol)

rng = random.Random(7)
budget = DerivationBudget()
print("\nA few derivations and their evaluations:")
shown = 0
while shown < 8:
    s = sample_derivation(grammar, budget, rng)
    if s is None:
        continue                     # ran past the budget; resample
    outcome = eval_expr(s)
    verdict = outcome.value if outcome.ok else f"invalid ({outcome.invalid_reason})"
    print(f"  {s:32s} -> {verdict}")
    shown += 1

print("\nBuilding a 20k-sample dataset (seed 1) ...")
splits = build_dataset(grammar, 20_000, (500, 500), seed=1)
counts = splits.manifest["counts"]
print(f"  valid samples drawn : {counts['valid_samples']}")
print(f"  unique expressions  : {counts['unique']}"
      f"  (fraction {counts['unique'] / counts['valid_samples']:.3f})")
print(f"  splits              : train {counts['train']}, "
      f"valid {counts['validation']}, test {counts['test']}")
print(f"  vocabulary          : {len(splits.vocabulary)} tokens")

ex = splits.train[0]
print(f"\nFirst training example: {ex.expr!r} = {ex.y_raw}, "
      f"conditioning input {ex.y_cond[0]:+.3f}")
print("Token encoding:", splits.vocabulary.encode(ex.expr).tolist())
