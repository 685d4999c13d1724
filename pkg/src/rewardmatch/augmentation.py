"""Edit-distance perturbation sampling and augmentation baselines.

A perturbation draws an edit count m from a temperature-controlled
distribution and applies m random single-character edits (insert, delete,
or substitute).  Two distance distributions are provided because a pure
exponential and the count-weighted construction behave very differently
for realistic string lengths; ``calibration_report`` makes the choice
visible instead of hiding it.

Classic augmentation keeps perturbed strings paired with their re-evaluated
property; the RAML-style variant keeps pairing them with the source's
original property.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import comb, exp

import numpy as np

from .evaluator import eval_expr

__all__ = [
    "EXPRESSION_ALPHABET",
    "AugmentConfig",
    "AugmentedRecord",
    "edit_distance_pmf",
    "calibration_report",
    "sample_edit_distance",
    "perturb",
    "augment_classic",
    "augment_raml",
    "extend_train_split",
    "edit_sensitivity_study",
    "write_study_csv",
    "write_augmented_tsv",
]

EXPRESSION_ALPHABET = "0123456789+-*/()"

EXPONENTIAL = "exponential"
COUNT_WEIGHTED = "count_weighted"


@dataclass(frozen=True)
class AugmentConfig:
    tau: float = 0.745
    max_edit_distance: int = 5
    distance_mode: str = COUNT_WEIGHTED
    per_instance_target: int = 10
    max_attempts: int = 500

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.max_edit_distance < 1:
            raise ValueError("max_edit_distance must be >= 1")
        if self.distance_mode not in (EXPONENTIAL, COUNT_WEIGHTED):
            raise ValueError(f"unknown distance mode {self.distance_mode!r}")


@dataclass(frozen=True)
class AugmentedRecord:
    expr: str
    y_raw: int
    source_index: int
    edit_distance: int


def edit_distance_pmf(config, seq_len, vocab_size=len(EXPRESSION_ALPHABET)):
    """p(m) for m = 0..max_edit_distance under the configured mode.

    exponential:     p(m) proportional to exp(-m / tau)
    count_weighted:  p(m) proportional to C(seq_len, m) (V-1)^m exp(-m / tau)
                     (the substitution-count approximation of the number of
                     strings at distance m)
    """
    ms = np.arange(config.max_edit_distance + 1)
    weights = np.exp(-ms / config.tau)
    if config.distance_mode == COUNT_WEIGHTED:
        counts = np.array([comb(seq_len, int(m)) * (vocab_size - 1) ** int(m)
                           if m <= seq_len else 0 for m in ms], dtype=np.float64)
        weights = weights * counts
    total = weights.sum()
    if total <= 0:
        raise ValueError("degenerate edit-distance distribution")
    return weights / total


def calibration_report(config, seq_len, vocab_size=len(EXPRESSION_ALPHABET)):
    """The full p(m) table plus p(0) for the chosen mode."""
    pmf = edit_distance_pmf(config, seq_len, vocab_size)
    return {
        "mode": config.distance_mode,
        "tau": config.tau,
        "seq_len": seq_len,
        "pmf": pmf.tolist(),
        "p_zero": float(pmf[0]),
    }


def sample_edit_distance(config, seq_len, vocab_size, rng):
    pmf = edit_distance_pmf(config, seq_len, vocab_size)
    u = rng.random()
    return int((pmf.cumsum() < u).sum())


def perturb(s, m, rng, alphabet=EXPRESSION_ALPHABET):
    """Apply m random single-character edits; m=0 returns s unchanged.

    Each edit picks insert/delete/substitute and a position uniformly;
    edits may cancel, so the final edit distance is at most m.  Deleting
    from an empty string is re-drawn as an insert or substitute.
    """
    if m < 0:
        raise ValueError("edit count must be non-negative")
    chars = list(s)
    for _ in range(m):
        op = rng.integers(3)
        if op == 0 and not chars:
            op = 1 + rng.integers(2)    # nothing to delete; insert instead
        if op == 0:                     # delete
            del chars[rng.integers(len(chars))]
        elif op == 1:                   # insert
            pos = rng.integers(len(chars) + 1)
            chars.insert(pos, alphabet[rng.integers(len(alphabet))])
        else:                           # substitute
            if not chars:
                chars.append(alphabet[rng.integers(len(alphabet))])
            else:
                chars[rng.integers(len(chars))] = alphabet[rng.integers(len(alphabet))]
    return "".join(chars)


def _augment(examples, config, rng, relabel):
    """Shared perturb-until-valid collection loop.

    relabel=True pairs each kept string with its own evaluated value
    (classic); relabel=False keeps the source's value (RAML-style).
    Returns (records, stats).
    """
    seen = {ex.expr for ex in examples}
    records = []
    shortfall = 0
    attempts_total = 0
    for idx, ex in enumerate(examples):
        collected = 0
        for _ in range(config.max_attempts):
            if collected >= config.per_instance_target:
                break
            attempts_total += 1
            m = sample_edit_distance(config, len(ex.expr),
                                     len(EXPRESSION_ALPHABET), rng)
            s = perturb(ex.expr, m, rng)
            outcome = eval_expr(s)
            if not outcome.ok:
                continue
            if s in seen:
                continue
            seen.add(s)
            collected += 1
            records.append(AugmentedRecord(
                expr=s,
                y_raw=outcome.value if relabel else ex.y_raw,
                source_index=idx,
                edit_distance=m,
            ))
        shortfall += config.per_instance_target - collected
    stats = {
        "sources": len(examples),
        "kept": len(records),
        "shortfall": shortfall,
        "attempts": attempts_total,
    }
    return records, stats


def augment_classic(examples, config, rng):
    """Valid perturbations paired with their re-evaluated values.

    Every emitted record satisfies eval(expr) == y_raw by construction;
    duplicates of the originals and of other augmented strings are
    dropped before counting toward the per-instance target.
    """
    return _augment(examples, config, rng, relabel=True)


def augment_raml(examples, config, rng):
    """Valid perturbations paired with their SOURCE example's value."""
    return _augment(examples, config, rng, relabel=False)


def extend_train_split(splits, records):
    """New (tokens, y_cond) training pair list: originals plus records."""
    from .dataset import COND_SCALE
    vocab = splits.vocabulary
    pairs = [(ex.tokens, ex.y_cond) for ex in splits.train]
    for rec in records:
        pairs.append((vocab.encode(rec.expr),
                      np.array([rec.y_raw / COND_SCALE])))
    return pairs


def edit_sensitivity_study(strings, m_range, samples_per_m, rng):
    """Validity / uniqueness / property-MSE of perturbations per distance.

    For each m, perturbs ``samples_per_m`` randomly chosen source strings
    with exactly m edits and reports the fraction that stay valid, the
    distinct fraction among the valid ones, and the mean squared value
    difference from the source.
    """
    strings = list(strings)
    values = {}
    rows = []
    for m in m_range:
        n_valid = 0
        sq_err = 0.0
        distinct = set()
        for _ in range(samples_per_m):
            src = strings[rng.integers(len(strings))]
            if src not in values:
                values[src] = eval_expr(src).value
            out = perturb(src, m, rng)
            outcome = eval_expr(out)
            if not outcome.ok:
                continue
            n_valid += 1
            distinct.add(out)
            diff = outcome.value - values[src]
            sq_err += diff * diff
        rows.append({
            "m": m,
            "samples": samples_per_m,
            "validity": n_valid / samples_per_m,
            "uniqueness": len(distinct) / n_valid if n_valid else 0.0,
            "mse": sq_err / n_valid if n_valid else float("nan"),
        })
    return rows


def write_study_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["m", "samples", "validity",
                                                "uniqueness", "mse"])
        writer.writeheader()
        writer.writerows(rows)


def write_augmented_tsv(records, path):
    """Augmented pairs in the dataset TSV format plus provenance columns."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(f"{rec.expr}\t{rec.y_raw}\t{rec.source_index}"
                     f"\t{rec.edit_distance}\n")
