"""Generation-quality and conditional-accuracy metrics.

Conventions (stamped into every report): uniqueness is the distinct
fraction among valid samples, novelty the fraction of distinct-valid
samples unseen in training, and test NLL is reported per token.  Invalid
generations never enter error statistics but are always counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .evaluator import eval_expr

__all__ = [
    "GenerationStats",
    "EvalReport",
    "generation_metrics",
    "conditional_eval_scalar",
    "conditional_eval_vector",
    "pearson_correlation",
]


@dataclass(frozen=True)
class GenerationStats:
    validity: float
    uniqueness: float
    novelty: float
    n_total: int
    n_valid: int
    n_distinct_valid: int
    degenerate: bool = False    # no valid samples; rates reported as 0


@dataclass
class EvalReport:
    validity: float = 0.0
    uniqueness: float = 0.0
    novelty: float = 0.0
    mae: float = float("nan")
    exact_accuracy: float = 0.0
    within_3_accuracy: float = 0.0
    test_nll_per_token: float = float("nan")
    stds: dict = field(default_factory=dict)
    per_property_mse: list | None = None
    per_property_correlation: list | None = None
    correlation_flags: list | None = None
    n_invalid: int = 0
    metadata: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def generation_metrics(samples, train_set):
    """Validity, uniqueness, and novelty of a sample list.

    validity = valid / total; uniqueness = distinct valid / valid;
    novelty = distinct valid not in the training set / distinct valid.
    """
    if not samples:
        raise ValueError("empty sample list")
    valid = [s for s in samples if s is not None and eval_expr(s).ok]
    distinct = set(valid)
    if not valid:
        return GenerationStats(0.0, 0.0, 0.0, len(samples), 0, 0,
                               degenerate=True)
    novel = sum(1 for s in distinct if s not in train_set)
    return GenerationStats(
        validity=len(valid) / len(samples),
        uniqueness=len(distinct) / len(valid),
        novelty=novel / len(distinct),
        n_total=len(samples),
        n_valid=len(valid),
        n_distinct_valid=len(distinct),
    )


def _sample_strings(model, vocab, conds, S, rng, chunk=None):
    """S decoded samples per conditioning row; None marks invalid decodes."""
    if chunk is None:
        chunk = max(1, 8192 // S)      # cap the row count of one batch
    out = []
    for lo in range(0, len(conds), chunk):
        block = np.repeat(conds[lo:lo + chunk], S, axis=0)
        tokens = model.sample_batch(block, rng)
        out.extend(vocab.decode_generated(t) for t in tokens)
    return out     # grouped: target_0 x S, target_1 x S, ...


def conditional_eval_scalar(model, test_examples, vocab, train_strings,
                            S=25, repeats=6, rng=None, metadata=None):
    """The scalar-task evaluation protocol.

    Samples S expressions per test target, discards invalid ones, and
    computes MAE, exact accuracy, within-3 accuracy, and the generation
    quality rates, repeated ``repeats`` times (means and standard
    deviations over repetitions).  Per-token NLL of the ground-truth test
    pairs is computed once (it is deterministic).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    conds = np.stack([ex.y_cond for ex in test_examples])
    targets = np.array([ex.y_raw for ex in test_examples], dtype=np.float64)
    per_repeat = {k: [] for k in ("validity", "uniqueness", "novelty",
                                  "mae", "exact_accuracy", "within_3_accuracy")}
    n_invalid = 0
    for _ in range(repeats):
        samples = _sample_strings(model, vocab, conds, S, rng)
        stats = generation_metrics(samples, train_strings)
        errors = []
        for t_i, y in enumerate(targets):
            for s in samples[t_i * S:(t_i + 1) * S]:
                if s is None:
                    continue
                outcome = eval_expr(s)
                if outcome.ok:
                    errors.append(abs(outcome.value - y))
        errors = np.array(errors)
        n_invalid += stats.n_total - stats.n_valid
        per_repeat["validity"].append(stats.validity)
        per_repeat["uniqueness"].append(stats.uniqueness)
        per_repeat["novelty"].append(stats.novelty)
        per_repeat["mae"].append(float(errors.mean()) if len(errors) else float("nan"))
        per_repeat["exact_accuracy"].append(
            float((errors == 0).mean()) if len(errors) else 0.0)
        per_repeat["within_3_accuracy"].append(
            float((errors <= 3).mean()) if len(errors) else 0.0)

    test_tokens = [ex.tokens for ex in test_examples]
    nll = model.mean_token_nll(test_tokens, conds, pad_id=vocab.pad_id)

    report = EvalReport(
        test_nll_per_token=float(nll),
        n_invalid=n_invalid,
        metadata={
            "S": S,
            "repeats": repeats,
            "n_targets": len(test_examples),
            "nll_convention": "per_token",
            "uniqueness_denominator": "valid",
            "novelty_denominator": "distinct_valid",
            **(metadata or {}),
        },
    )
    for key, vals in per_repeat.items():
        arr = np.array(vals, dtype=np.float64)
        setattr(report, key, float(np.nanmean(arr)))
        report.stds[key] = float(np.nanstd(arr, ddof=1)) if repeats > 1 else 0.0
    return report


def pearson_correlation(x, y):
    """Pearson r; returns (0.0, flagged=True) for zero-variance inputs.

    Variance is judged relative to the data's magnitude so a constant
    vector is degenerate even when float summation leaves a ~1e-16 residue.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx, sy = x.std(), y.std()
    tol_x = 1e-12 * (1.0 + np.abs(x).max(initial=0.0))
    tol_y = 1e-12 * (1.0 + np.abs(y).max(initial=0.0))
    if sx <= tol_x or sy <= tol_y or len(x) < 2:
        return 0.0, True
    r = float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))
    return r, False


def conditional_eval_vector(model, oracle, test_conds, vocab, S=10, rng=None,
                            metadata=None):
    """Vector-oracle protocol: per-dimension MSE and Pearson correlation.

    For each conditioning row, S samples are drawn, invalid ones dropped,
    and the mean property vector of the survivors compared against the
    target.  Targets with no valid sample are excluded and counted.
    Degenerate (zero-variance) correlations are reported as 0 and flagged.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    test_conds = np.asarray(test_conds, dtype=np.float64)
    samples = _sample_strings(model, vocab, test_conds, S, rng)
    achieved, wanted = [], []
    n_invalid = 0
    n_skipped_targets = 0
    for t_i in range(len(test_conds)):
        props = []
        for s in samples[t_i * S:(t_i + 1) * S]:
            p = oracle.evaluate(s) if s is not None else None
            if p is None:
                n_invalid += 1
                continue
            props.append(p)
        if not props:
            n_skipped_targets += 1
            continue
        achieved.append(np.mean(props, axis=0))
        wanted.append(test_conds[t_i])
    if not achieved:
        raise ValueError("every target produced only invalid samples")
    achieved = np.stack(achieved)
    wanted = np.stack(wanted)
    mse = ((achieved - wanted) ** 2).mean(axis=0)
    corrs, flags = [], []
    for d in range(achieved.shape[1]):
        r, flagged = pearson_correlation(wanted[:, d], achieved[:, d])
        corrs.append(r)
        flags.append(flagged)
    return EvalReport(
        per_property_mse=[float(v) for v in mse],
        per_property_correlation=corrs,
        correlation_flags=flags,
        n_invalid=n_invalid,
        metadata={
            "S": S,
            "n_targets": len(test_conds),
            "n_targets_skipped": n_skipped_targets,
            **(metadata or {}),
        },
    )
