"""Training loops: maximum likelihood, reward-matched surrogate (with an
optional entropy regularizer), REINFORCE, and RAML-style importance
sampling.

Every objective runs through one shared skeleton (shuffled mini-batches,
Adam with global-norm clipping, per-epoch validation, early stopping on
the validation decode error, best-checkpoint retention); an objective
only changes how batches and their per-sequence weights are assembled.
The surrogate with a degenerate match index therefore reproduces the
maximum-likelihood trajectory exactly.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import neural
from .augmentation import (AugmentConfig, EXPRESSION_ALPHABET,
                           edit_distance_pmf, perturb, sample_edit_distance)
from .entropy import greedy_entropy_with_grads
from .evaluator import eval_expr
from .model import ConditionalLSTM, pad_batch
from .reward import presample_training_pairs, reward_l1, reward_scalar

__all__ = [
    "TrainConfig",
    "ValMetric",
    "TrainResult",
    "TrainingDiverged",
    "train_ml",
    "train_surrogate",
    "train_surrogate_entropy",
    "train_reinforce",
    "train_raml_is",
    "early_stop",
    "make_gaussian_reward_fn",
    "make_l1_reward_fn",
    "write_history_csv",
    "write_summary_json",
]

OBJECTIVES = ("ml", "surrogate", "surrogate_entropy", "reinforce", "raml_is")


@dataclass
class TrainConfig:
    objective: str = "ml"
    batch_size: int = 20
    max_epochs: int = 100
    lr: float = 0.001
    entropy_weight: float = 0.0
    samples_per_target: int = 10       # K matched examples per target
    reinforce_samples: int = 30        # M model samples per target
    reinforce_temperature: float = 0.5
    warm_start_epochs: int = 6
    seed: int = 0
    early_stop_factor: float = 2.0
    grad_clip: float = 5.0
    val_targets: int = 2000            # fixed validation subset for decode error
    invalid_penalty: float = 1000.0    # decode error charged for invalid decodes
    presample: bool = True             # draw matched pairs once up front
    max_steps: int | None = None       # optional hard step budget (reinforce)
    raml_proposals: int = 10
    raml_tau: float = 0.745

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_factor <= 1:
            raise ValueError("early_stop_factor must exceed 1")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be non-negative")

    def to_dict(self):
        return asdict(self)

    def replace(self, **kw):
        return TrainConfig(**{**self.to_dict(), **kw})


@dataclass
class ValMetric:
    epoch: int
    property_error: float
    nll: float


@dataclass
class TrainResult:
    model: ConditionalLSTM
    history: list = field(default_factory=list)   # (epoch, train_loss, ValMetric)
    best_epoch: int = -1
    best_property_error: float = float("inf")
    stopped_early: bool = False
    wall_clock: float = 0.0
    counters: dict = field(default_factory=dict)


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; the offending batch is attached."""

    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


def early_stop(history, factor=2.0):
    """True when the latest error exceeds factor x the best error so far."""
    if not history:
        return False
    best = min(m.property_error for m in history)
    return history[-1].property_error > factor * best


def make_gaussian_reward_fn():
    """Squared-error reward of a sampled string's value against a target."""
    def fn(sample, y_raw):
        value = _oracle_value(sample)
        if value is None:
            return None
        return reward_scalar(value, y_raw)
    return fn


def make_l1_reward_fn(oracle, spec):
    """Thresholded L1 reward of a sampled string against a target vector."""
    def fn(sample, y_target):
        props = oracle.evaluate(sample)
        if props is None:
            return None
        return reward_l1(props, y_target, spec)
    return fn


def _oracle_value(s):
    outcome = eval_expr(s)
    return outcome.value if outcome.ok else None


class _Runner:
    """Shared batching / optimizer / validation / early-stop skeleton."""

    def __init__(self, splits, model_config, cfg):
        self.splits = splits
        self.cfg = cfg
        seq = np.random.SeedSequence(cfg.seed)
        init_seed, shuffle_seed, val_seed, objective_seed = seq.spawn(4)
        self.objective_seed = objective_seed
        self.model = ConditionalLSTM(
            model_config, rng=np.random.default_rng(init_seed),
            start_id=splits.vocabulary.start_id,
            stop_id=splits.vocabulary.stop_id)
        self.shuffle_rng = np.random.default_rng(shuffle_seed)
        val_rng = np.random.default_rng(val_seed)
        n_val = min(cfg.val_targets, len(splits.validation))
        pick = val_rng.choice(len(splits.validation), size=n_val, replace=False)
        self.val_subset = [splits.validation[i] for i in pick]
        self.counters = {}
        self.stop_requested = False   # objectives may end training early

    def validation_metrics(self, epoch):
        cfg = self.cfg
        model = self.model
        vocab = self.splits.vocabulary
        conds = np.stack([ex.y_cond for ex in self.val_subset])
        errors = np.empty(len(self.val_subset))
        chunk = 512
        for lo in range(0, len(self.val_subset), chunk):
            decoded = model.greedy_decode_batch(conds[lo:lo + chunk])
            for k, tokens in enumerate(decoded):
                ex = self.val_subset[lo + k]
                s = vocab.decode_generated(tokens)
                value = _oracle_value(s) if s is not None else None
                errors[lo + k] = (abs(value - ex.y_raw) if value is not None
                                  else cfg.invalid_penalty)
        val_tokens = [ex.tokens for ex in self.val_subset]
        nll = model.mean_token_nll(val_tokens, conds, pad_id=vocab.pad_id)
        return ValMetric(epoch, float(errors.mean()), float(nll))

    def default_builder(self, batch):
        """batch of (tokens, cond) -> training_step arguments."""
        padded, lengths = pad_batch([t for t, _ in batch],
                                    self.splits.vocabulary.pad_id)
        conds = np.stack([c for _, c in batch])
        return padded, lengths, conds, None

    def run(self, pairs_for_epoch, batch_builder=None, extra_grad_fn=None):
        """The one training loop every objective funnels through.

        ``pairs_for_epoch(epoch)`` supplies the epoch's item list;
        ``batch_builder(batch_items)`` turns a slice of it into
        (padded, lengths, conds, weights) or None to skip the batch;
        ``extra_grad_fn(model, conds)`` may add regularizer gradients and
        returns its loss contribution.
        """
        cfg = self.cfg
        model = self.model
        builder = batch_builder or self.default_builder
        result = TrainResult(model=model)
        t_start = time.time()
        best_params = None
        for epoch in range(1, cfg.max_epochs + 1):
            items = pairs_for_epoch(epoch)
            order = np.arange(len(items))
            self.shuffle_rng.shuffle(order)
            epoch_loss, n_batches = 0.0, 0
            for lo in range(0, len(order), cfg.batch_size):
                if self.stop_requested:
                    break
                batch = [items[i] for i in order[lo:lo + cfg.batch_size]]
                built = builder(batch)
                if built is None:
                    self.counters["skipped_batches"] = (
                        self.counters.get("skipped_batches", 0) + 1)
                    continue
                padded, lengths, conds, weights = built
                model.params.zero_grads()
                loss = model.training_step(padded, lengths, conds, weights)
                if extra_grad_fn is not None:
                    loss += extra_grad_fn(model, conds)
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}",
                        batch={"padded": padded, "conds": conds})
                model.params.clip_grad_norm(cfg.grad_clip)
                neural.adam_step(model.params, lr=cfg.lr)
                epoch_loss += loss
                n_batches += 1
            metric = self.validation_metrics(epoch)
            result.history.append((epoch, epoch_loss / max(n_batches, 1), metric))
            if metric.property_error < result.best_property_error:
                result.best_property_error = metric.property_error
                result.best_epoch = epoch
                best_params = model.params.copy()
            if early_stop([m for _, _, m in result.history],
                          cfg.early_stop_factor):
                result.stopped_early = True
                break
            if self.stop_requested:
                break
        if best_params is not None:
            model.params.load_values(best_params)
        result.wall_clock = time.time() - t_start
        result.counters = dict(self.counters)
        return result


def train_ml(splits, model_config, cfg, train_pairs=None):
    """Maximize conditional log-likelihood of (tokens, cond) pairs.

    ``train_pairs`` overrides the training pair list (used by the
    augmentation baselines, which extend it); validation always runs on
    the dataset's own validation split.
    """
    runner = _Runner(splits, model_config, cfg)
    if train_pairs is None:
        train_pairs = [(ex.tokens, ex.y_cond) for ex in splits.train]
    return runner.run(lambda epoch: train_pairs)


def train_surrogate(splits, index, model_config, cfg):
    """Reward-matched surrogate: likelihood of matched training pairs.

    With presampling (the default, and the more stable choice) the
    expanded K-per-target pair set is drawn once and consumed by the
    plain likelihood loop; otherwise matches are redrawn every epoch.
    """
    runner = _Runner(splits, model_config, cfg)
    match_rng = np.random.default_rng(runner.objective_seed)
    train = splits.train

    def draw_pairs():
        expanded = presample_training_pairs(train, index,
                                            cfg.samples_per_target, match_rng)
        return [(train[j].tokens, train[i].y_cond) for j, i in expanded]

    if cfg.presample:
        pairs = draw_pairs()
        return runner.run(lambda epoch: pairs)
    return runner.run(lambda epoch: draw_pairs())


def train_surrogate_entropy(splits, index, model_config, cfg):
    """Surrogate loss minus entropy_weight * mean greedy-prefix entropy."""
    if cfg.entropy_weight <= 0:
        raise ValueError("entropy_weight must be positive for this objective")
    runner = _Runner(splits, model_config, cfg)
    match_rng = np.random.default_rng(runner.objective_seed)
    train = splits.train
    expanded = presample_training_pairs(train, index,
                                        cfg.samples_per_target, match_rng)
    pairs = [(train[j].tokens, train[i].y_cond) for j, i in expanded]

    def entropy_term(model, conds):
        # maximizing entropy: its weighted mean enters the loss negated
        w = np.full(len(conds), -cfg.entropy_weight / len(conds))
        values = greedy_entropy_with_grads(model, conds, weights=w)
        return -cfg.entropy_weight * float(values.mean())

    return runner.run(lambda epoch: pairs, extra_grad_fn=entropy_term)


def train_reinforce(splits, reward_fn, model_config, cfg,
                    warm_start_model=None):
    """Score-function gradient ascent on expected reward.

    Per batch of targets, samples M sequences each from the model,
    discards invalid ones (reward_fn returns None), and weights the kept
    samples' NLL gradients by their rewards (mean over kept samples).
    Starts from a warm-start model, training one with the likelihood
    objective for ``warm_start_epochs`` when none is supplied.
    """
    runner = _Runner(splits, model_config, cfg)
    if warm_start_model is None:
        warm_cfg = cfg.replace(objective="ml", max_epochs=cfg.warm_start_epochs,
                               max_steps=None)
        warm_start_model = train_ml(splits, model_config, warm_cfg).model
    runner.model.params.load_values(warm_start_model.params)

    model = runner.model
    vocab = splits.vocabulary
    sample_rng = np.random.default_rng(runner.objective_seed)
    counters = runner.counters
    counters.update({"discarded_invalid": 0, "reinforce_steps": 0})
    max_body = model.config.max_len - 2

    def builder(batch):
        if cfg.max_steps and counters["reinforce_steps"] >= cfg.max_steps:
            runner.stop_requested = True
            return None
        counters["reinforce_steps"] += 1
        targets = [ex for ex, in batch]
        conds = np.repeat(np.stack([ex.y_cond for ex in targets]),
                          cfg.reinforce_samples, axis=0)
        sampled = model.sample_batch(conds, sample_rng)
        kept, kept_conds, rewards = [], [], []
        for s_i, tokens in enumerate(sampled):
            target = targets[s_i // cfg.reinforce_samples]
            text = vocab.decode_generated(tokens)
            r = reward_fn(text, target.y_raw) if text is not None else None
            if r is None or len(text) > max_body:
                counters["discarded_invalid"] += 1
                continue
            kept.append(tokens)
            kept_conds.append(conds[s_i])
            rewards.append(r)
        if not kept or not any(rewards):
            return None
        weights = np.asarray(rewards) / len(rewards)
        padded, lengths = pad_batch(kept, vocab.pad_id)
        return padded, lengths, np.stack(kept_conds), weights

    items = [(ex,) for ex in splits.train]
    return runner.run(lambda epoch: items, batch_builder=builder)


def train_raml_is(splits, model_config, cfg):
    """Importance sampling with edit-distance proposals.

    For each training pair (x*, y*), proposals are drawn by perturbing
    x*; each valid proposal x is weighted by reward(x; y*) over the
    proposal probability of its sampled edit distance, self-normalized
    within the target's proposals.  Zero-reward proposals contribute
    nothing; targets whose proposals all have zero reward are skipped and
    counted.
    """
    runner = _Runner(splits, model_config, cfg)
    vocab = splits.vocabulary
    aug_cfg = AugmentConfig(tau=cfg.raml_tau)
    proposal_rng = np.random.default_rng(runner.objective_seed)
    counters = runner.counters
    counters.update({"proposals": 0, "zero_reward": 0, "skipped_targets": 0})
    max_body = runner.model.config.max_len - 2
    pmf_cache = {}

    def proposals_for(ex):
        n_len = len(ex.expr)
        if n_len not in pmf_cache:
            pmf_cache[n_len] = edit_distance_pmf(aug_cfg, n_len)
        pmf = pmf_cache[n_len]
        kept, rewards, qs = [], [], []
        for _ in range(cfg.raml_proposals):
            m = sample_edit_distance(aug_cfg, n_len,
                                     len(EXPRESSION_ALPHABET), proposal_rng)
            s = perturb(ex.expr, m, proposal_rng, EXPRESSION_ALPHABET)
            counters["proposals"] += 1
            value = _oracle_value(s)
            r = reward_scalar(value, ex.y_raw) if value is not None else 0.0
            if r == 0.0 or len(s) > max_body:
                counters["zero_reward"] += 1
                continue
            kept.append(s)
            rewards.append(r)
            qs.append(pmf[m])
        if not kept:
            counters["skipped_targets"] += 1
            return []
        w = np.asarray(rewards) / np.asarray(qs)
        w /= w.sum()
        return [(vocab.encode(s), ex.y_cond, wi) for s, wi in zip(kept, w)]

    def builder(batch):
        items = []
        for ex, in batch:
            items.extend((t, c, w / len(batch))
                         for t, c, w in proposals_for(ex))
        if not items:
            return None
        padded, lengths = pad_batch([t for t, _, _ in items], vocab.pad_id)
        conds = np.stack([c for _, c, _ in items])
        weights = np.array([w for _, _, w in items])
        return padded, lengths, conds, weights

    items = [(ex,) for ex in splits.train]
    return runner.run(lambda epoch: items, batch_builder=builder)


def write_history_csv(result, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_error", "val_nll"])
        for epoch, loss, metric in result.history:
            writer.writerow([epoch, f"{loss:.6f}",
                             f"{metric.property_error:.6f}",
                             f"{metric.nll:.6f}"])


def write_summary_json(result, cfg, path):
    summary = {
        "config": cfg.to_dict(),
        "best_epoch": result.best_epoch,
        "best_property_error": result.best_property_error,
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
        "counters": result.counters,
        "final_val_nll": result.history[-1][2].nll if result.history else None,
        "wall_clock_seconds": round(result.wall_clock, 3),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
