"""Sequence-entropy estimators for the conditional model.

Four approximations of H[p(x | y)] plus an exact enumeration oracle for
tiny models:

* ``mc``       one Monte Carlo sample of -log p per trajectory
* ``decomposed``  closed-form per-step entropies along sampled prefixes
* ``greedy``   closed-form per-step entropies along the argmax prefix
               (deterministic and differentiable; the training regularizer)
* ``straight_through``  per-step entropies along an unroll fed with the
               probability-weighted mean token embedding

Sequences that never emit the stop token within the length cap are
treated as terminal events of their own; per-step terms cease once stop
has been emitted (or, for the deterministic unrolls, once stop is the
argmax).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .neural import softmax

__all__ = [
    "EntropyEstimate",
    "ESTIMATOR_NAMES",
    "enumerate_sequences",
    "entropy_exact_enum",
    "entropy_mc_A",
    "entropy_decomposed_B",
    "entropy_greedy",
    "greedy_entropy_with_grads",
    "entropy_straight_through",
    "entropy_bench",
    "write_bench_csv",
    "write_bench_summary",
]

MC_A = "mc_A"
DECOMPOSED_B = "decomposed_B"
GREEDY = "greedy"
STRAIGHT_THROUGH = "straight_through"
EXACT_ENUM = "exact_enum"
ESTIMATOR_NAMES = (MC_A, DECOMPOSED_B, GREEDY, STRAIGHT_THROUGH)

ENUMERATION_GUARD = 1_000_000


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    estimator: str
    sample_count: int = 0


def _log_softmax(logits):
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def _cond_row(model, y_cond):
    cond = np.asarray(y_cond, dtype=np.float64).reshape(1, -1)
    if cond.shape[1] != model.config.cond_dim:
        raise ValueError("conditioning dimension mismatch")
    return cond


def enumerate_sequences(model, y_cond, max_len=None):
    """Yield (body tokens, log probability, is_complete) for every event.

    Events are stop-terminated sequences plus maximal-length prefixes that
    never stopped; their probabilities sum to 1.  Guarded against domains
    larger than one million sequences.
    """
    cfg = model.config
    max_gen = (max_len or cfg.max_len) - 1
    if cfg.vocab_size ** max_gen > ENUMERATION_GUARD:
        raise ValueError("domain too large to enumerate")
    cond = _cond_row(model, y_cond)

    def recurse(prev_token, state, prefix, logp, depth):
        branch_state = [(h.copy(), c.copy()) for h, c in state]
        logits = model.step_logits(
            np.array([prev_token], dtype=np.int64), cond, branch_state)
        logstep = _log_softmax(logits[0])
        for k in range(cfg.vocab_size):
            lp = logp + logstep[k]
            body = prefix + [k]
            if k == model.stop_id:
                yield body, lp, True
            elif depth + 1 >= max_gen:
                yield body, lp, False
            else:
                yield from recurse(k, branch_state, body, lp, depth + 1)

    yield from recurse(model.start_id, model.zero_state(1), [], 0.0, 0)


def entropy_exact_enum(model, y_cond, max_len=None):
    """-sum p log p over the full (tiny) event space, in nats."""
    total = 0.0
    for _, logp, _ in enumerate_sequences(model, y_cond, max_len):
        p = np.exp(logp)
        if p > 0:
            total -= p * logp
    return float(total)


def _unroll_sampled(model, y_cond, S, rng, max_len=None):
    """Sample S trajectories; returns per-sample (-log p, sum of step entropies)."""
    cfg = model.config
    max_gen = (max_len or cfg.max_len) - 1
    cond = np.repeat(_cond_row(model, y_cond), S, axis=0)
    state = model.zero_state(S)
    current = np.full(S, model.start_id, dtype=np.int64)
    alive = np.ones(S, dtype=bool)
    neg_logp = np.zeros(S)
    step_entropy = np.zeros(S)
    for _ in range(max_gen):
        logits = model.step_logits(current, cond, state)
        probs = softmax(logits)
        with np.errstate(divide="ignore"):
            logs = np.log(probs)
        plogp = np.where(probs > 0, probs * logs, 0.0)
        step_h = -plogp.sum(axis=1)
        u = rng.random(S)
        nxt = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
        np.clip(nxt, 0, cfg.vocab_size - 1, out=nxt)
        neg_logp[alive] -= logs[alive, nxt[alive]]
        step_entropy[alive] += step_h[alive]
        alive = alive & (nxt != model.stop_id)
        if not alive.any():
            break
        current = nxt
    return neg_logp, step_entropy


def entropy_mc_A(model, y_cond, S, rng, max_len=None):
    """Monte Carlo mean of -log p over S sampled trajectories."""
    if S < 1:
        raise ValueError("S must be >= 1")
    neg_logp, _ = _unroll_sampled(model, y_cond, S, rng, max_len)
    return EntropyEstimate(float(neg_logp.mean()), MC_A, S)


def entropy_decomposed_B(model, y_cond, S, rng, max_len=None):
    """Closed-form per-step entropies averaged over S sampled prefixes."""
    if S < 1:
        raise ValueError("S must be >= 1")
    _, step_entropy = _unroll_sampled(model, y_cond, S, rng, max_len)
    return EntropyEstimate(float(step_entropy.mean()), DECOMPOSED_B, S)


def entropy_greedy(model, y_cond, max_len=None):
    """Per-step entropies along the greedy prefix; deterministic."""
    values = greedy_entropy_with_grads(
        model, _cond_row(model, y_cond), weights=None, max_len=max_len)
    return EntropyEstimate(float(values[0]), GREEDY)


def greedy_entropy_with_grads(model, conds, weights=None, max_len=None):
    """Batched greedy-prefix entropy; optionally accumulates gradients.

    When ``weights`` is given, d(sum_b weights[b] * H_b)/dtheta is added
    to the model's gradient buffers.  The gradient flows through the step
    distributions and the recurrent activations but not through the
    argmax prefix selection itself.
    """
    cfg = model.config
    conds = np.asarray(conds, dtype=np.float64)
    B = conds.shape[0]
    max_gen = (max_len or cfg.max_len) - 1
    state = model.zero_state(B)
    current = np.full(B, model.start_id, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    values = np.zeros(B)
    tape = [] if weights is not None else None
    dlogits_steps = []
    for _ in range(max_gen):
        logits = model.step_logits(current, conds, state, tape=tape)
        probs = softmax(logits)
        with np.errstate(divide="ignore"):
            logs = np.log(probs)
        plogp = np.where(probs > 0, probs * logs, 0.0)
        step_h = -plogp.sum(axis=1)
        values += np.where(alive, step_h, 0.0)
        if weights is not None:
            dH = -probs * (np.where(probs > 0, logs, 0.0) + step_h[:, None])
            dlogits_steps.append(dH * (weights * alive)[:, None])
        nxt = np.argmax(logits, axis=1)
        alive = alive & (nxt != model.stop_id)
        if not alive.any():
            break
        current = nxt
    if weights is not None and tape:
        model.backward_tokens(tape, np.stack(dlogits_steps, axis=1))
    return values


def entropy_straight_through(model, y_cond, max_len=None):
    """Unroll on probability-weighted mean embeddings; per-step entropies.

    Uses the same stop rule as the greedy estimator: a step's term is
    counted only while stop has not yet been the argmax.
    """
    cfg = model.config
    cond = _cond_row(model, y_cond)
    max_gen = (max_len or cfg.max_len) - 1
    state = model.zero_state(1)
    embed = model.params["embed"]
    x = np.concatenate([embed[[model.start_id]], cond], axis=1)
    total = 0.0
    for _ in range(max_gen):
        logits = model.step_logits_input(x, state)
        probs = softmax(logits)
        with np.errstate(divide="ignore"):
            logs = np.log(probs)
        plogp = np.where(probs > 0, probs * logs, 0.0)
        total += float(-plogp.sum())
        if np.argmax(logits[0]) == model.stop_id:
            break
        x = np.concatenate([probs @ embed, cond], axis=1)
    return EntropyEstimate(total, STRAIGHT_THROUGH)


def entropy_bench(model, y_cond, estimators=ESTIMATOR_NAMES, trials=15,
                  sample_sizes=(1, 10, 50), rng=None, max_len=None):
    """The estimator comparison protocol: repeated trials per sample size.

    Returns (rows, summary): rows are (estimator, S, trial, value) and the
    summary maps "estimator/S" to mean and standard deviation over trials.
    Deterministic estimators are re-run per trial and simply repeat their
    value.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    rows = []
    for name in estimators:
        for S in sample_sizes:
            for trial in range(trials):
                if name == MC_A:
                    est = entropy_mc_A(model, y_cond, S, rng, max_len)
                elif name == DECOMPOSED_B:
                    est = entropy_decomposed_B(model, y_cond, S, rng, max_len)
                elif name == GREEDY:
                    est = entropy_greedy(model, y_cond, max_len)
                elif name == STRAIGHT_THROUGH:
                    est = entropy_straight_through(model, y_cond, max_len)
                else:
                    raise ValueError(f"unknown estimator {name!r}")
                rows.append((name, S, trial, est.value))
    summary = {}
    for name in estimators:
        for S in sample_sizes:
            vals = np.array([v for n, s, _, v in rows if n == name and s == S])
            summary[f"{name}/S={S}"] = {
                "mean": float(vals.mean()),
                "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
            }
    return rows, summary


def write_bench_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "S", "trial", "value"])
        writer.writerows(rows)


def write_bench_summary(summary, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
