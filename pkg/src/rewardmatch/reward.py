"""Rewards, the training-set match distribution, and match samplers.

A reward scores a candidate's property vector against a target.  For a
fixed target, normalizing the rewards over a set of candidates yields a
probability distribution; restricted to the training set this becomes a
sparse per-target table of (training index, probability) rows that
training loops sample matched examples from.

For the scalar expression task the reward exp(-(f(x)-y)^2/2) makes that
distribution a discretized unit normal over values, so matches are drawn
by sampling a truncated Gaussian around the target, rounding, and picking
uniformly among training examples with that exact value.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "RewardSpec",
    "NoSupportError",
    "reward_scalar",
    "reward_l1",
    "normalize_over_set",
    "MatchIndex",
    "build_match_index",
    "sample_rounded_target",
    "sample_matches_scalar",
    "presample_training_pairs",
    "NormalizedRewardTable",
    "enumerate_token_strings",
    "discretized_truncated_normal",
    "TRUNCATION_BOUND",
]

TRUNCATION_BOUND = 999.0      # match targets are drawn inside (-999, 999)
GAUSSIAN_SCALAR = "gaussian_scalar"
L1_THRESHOLD = "l1_threshold"

_MAGIC = b"RMIX"
_VERSION = 1
_KIND_CODE = {GAUSSIAN_SCALAR: 1, L1_THRESHOLD: 2}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}


class NoSupportError(ValueError):
    """A target has no positive-reward candidates."""


@dataclass(frozen=True)
class RewardSpec:
    """Which reward to use and its temperature/cutoff parameters.

    lam is the temperature of exp(-lam * distance); epsilon is the L1
    cutoff beyond which the reward is exactly zero (l1_threshold only).
    """

    kind: str = GAUSSIAN_SCALAR
    lam: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in (GAUSSIAN_SCALAR, L1_THRESHOLD):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


def reward_scalar(fx, y):
    """exp(-(fx - y)^2 / 2); the squared-error reward for integer values."""
    d = float(fx) - float(y)
    return math.exp(-0.5 * d * d)


def reward_l1(fx, y, spec):
    """exp(-lam * l1(fx, y)) when the distance is within epsilon, else 0."""
    fx = np.asarray(fx, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if fx.shape != y.shape:
        raise ValueError(f"dimension mismatch: {fx.shape} vs {y.shape}")
    d = np.abs(fx - y).sum()
    if d > spec.epsilon:
        return 0.0
    return math.exp(-spec.lam * d)


def normalize_over_set(rewards):
    """Rewards -> probabilities; raises NoSupportError on all-zero input."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) == 0:
        raise ValueError("rewards must be a non-empty 1-d array")
    if np.any(r < 0):
        raise ValueError("rewards must be non-negative")
    total = r.sum()
    if total <= 0:
        raise NoSupportError("all rewards are zero")
    return r / total


class MatchIndex:
    """Per-target sparse match distributions over training indices.

    Scalar kind stores value buckets (uniform within a bucket); vector
    kind stores explicit (index, probability) rows per training target.
    """

    def __init__(self, kind, n_train, dataset_hash=""):
        self.kind = kind
        self.n_train = n_train
        self.dataset_hash = dataset_hash
        self.buckets = {}        # scalar: value -> np.ndarray of train indices
        self.rows = {}           # vector: target index -> (indices, probabilities)
        self._bucket_values = None

    # -- scalar side -------------------------------------------------------

    def bucket(self, value):
        return self.buckets.get(int(value))

    def sorted_bucket_values(self):
        if self._bucket_values is None:
            self._bucket_values = np.array(sorted(self.buckets), dtype=np.int64)
        return self._bucket_values

    def nearest_bucket_value(self, value):
        values = self.sorted_bucket_values()
        if len(values) == 0:
            raise NoSupportError("match index has no buckets")
        pos = np.searchsorted(values, value)
        candidates = []
        if pos > 0:
            candidates.append(values[pos - 1])
        if pos < len(values):
            candidates.append(values[pos])
        # nearest; ties resolved toward the smaller value
        return int(min(candidates, key=lambda v: (abs(int(v) - value), v)))

    # -- vector side ---------------------------------------------------------

    def row(self, target_index):
        return self.rows.get(int(target_index))

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            digest = self.dataset_hash.encode("utf-8")
            fh.write(_MAGIC)
            fh.write(struct.pack("<IBQI", _VERSION, _KIND_CODE[self.kind],
                                 self.n_train, len(digest)))
            fh.write(digest)
            if self.kind == GAUSSIAN_SCALAR:
                items = sorted(self.buckets.items())
                rows = [(v, idx, np.full(len(idx), 1.0 / len(idx)))
                        for v, idx in items]
            else:
                rows = [(t, idx, p) for t, (idx, p) in sorted(self.rows.items())]
            fh.write(struct.pack("<Q", len(rows)))
            for key, idx, prob in rows:
                fh.write(struct.pack("<qI", int(key), len(idx)))
                pairs = np.empty(len(idx), dtype=[("i", "<u8"), ("p", "<f8")])
                pairs["i"] = idx
                pairs["p"] = prob
                fh.write(pairs.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise ValueError(f"{path} is not a match index file")
            version, kind_code, n_train, digest_len = struct.unpack(
                "<IBQI", fh.read(17))
            if version != _VERSION:
                raise ValueError(f"unsupported index version {version}")
            digest = fh.read(digest_len).decode("utf-8")
            index = cls(_KIND_NAME[kind_code], n_train, digest)
            (n_rows,) = struct.unpack("<Q", fh.read(8))
            for _ in range(n_rows):
                key, count = struct.unpack("<qI", fh.read(12))
                pairs = np.frombuffer(fh.read(16 * count),
                                      dtype=[("i", "<u8"), ("p", "<f8")])
                idx = pairs["i"].astype(np.int64)
                if index.kind == GAUSSIAN_SCALAR:
                    index.buckets[key] = idx
                else:
                    index.rows[key] = (idx, pairs["p"].astype(np.float64))
        return index


def build_match_index(train_values=None, spec=None, properties=None,
                      dataset_hash="", row_cap=512, block_size=256):
    """Build the sparse match index for a training set.

    Scalar kind: pass ``train_values`` (integer value per training
    example); examples are bucketed by exact value.  Vector kind: pass
    ``properties`` (N x d array, row j = property vector of example j);
    each row i of the index holds the normalized positive rewards of all
    examples within the L1 cutoff of target i, keeping at most ``row_cap``
    entries (largest rewards first).  Empty rows are permitted and simply
    absent.
    """
    if spec is None:
        raise ValueError("a RewardSpec is required")
    if spec.kind == GAUSSIAN_SCALAR:
        if train_values is None:
            raise ValueError("scalar index needs train_values")
        values = np.asarray(train_values, dtype=np.int64)
        index = MatchIndex(GAUSSIAN_SCALAR, len(values), dataset_hash)
        order = np.argsort(values, kind="stable")
        sorted_vals = values[order]
        boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
        for chunk in np.split(order, boundaries):
            index.buckets[int(values[chunk[0]])] = chunk.copy()
        return index

    if properties is None:
        raise ValueError("vector index needs a properties matrix")
    props = np.asarray(properties, dtype=np.float64)
    n = len(props)
    index = MatchIndex(L1_THRESHOLD, n, dataset_hash)
    for start in range(0, n, block_size):
        block = props[start:start + block_size]
        # pairwise L1 distances, block targets x all candidates
        dists = np.abs(block[:, None, :] - props[None, :, :]).sum(axis=2)
        for bi in range(len(block)):
            i = start + bi
            mask = dists[bi] <= spec.epsilon
            if not mask.any():
                continue
            idx = np.flatnonzero(mask)
            rewards = np.exp(-spec.lam * dists[bi][idx])
            if len(idx) > row_cap:
                keep = np.argsort(rewards)[::-1][:row_cap]
                keep.sort()
                idx, rewards = idx[keep], rewards[keep]
            index.rows[i] = (idx, normalize_over_set(rewards))
    return index


def sample_rounded_target(y, rng, bound=TRUNCATION_BOUND):
    """Draw round(y') with y' ~ Normal(y, 1) truncated to (-bound, bound)."""
    while True:
        draw = y + rng.standard_normal()
        if -bound < draw < bound:
            return int(np.rint(draw))


def sample_matches_scalar(y, index, K, rng, max_tries=32):
    """K training indices whose values track a unit Gaussian around y.

    Each draw rounds a truncated Gaussian sample and picks uniformly from
    the bucket of that value; empty buckets are resampled up to
    ``max_tries`` times and then resolved to the nearest non-empty value.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not index.buckets:
        raise NoSupportError("match index is empty")
    out = np.empty(K, dtype=np.int64)
    for k in range(K):
        bucket = None
        for _ in range(max_tries):
            value = sample_rounded_target(y, rng)
            bucket = index.bucket(value)
            if bucket is not None:
                break
        if bucket is None:
            bucket = index.bucket(index.nearest_bucket_value(value))
        out[k] = bucket[rng.integers(len(bucket))]
    return out


def presample_training_pairs(examples, index, K, rng):
    """Expand a dataset into K matched pairs per target.

    Returns an (K*N, 2) array of (matched example index, target index)
    rows, in target order; row order is deterministic given the rng seed.
    """
    n = len(examples)
    pairs = np.empty((n * K, 2), dtype=np.int64)
    for i, ex in enumerate(examples):
        matches = sample_matches_scalar(ex.y_raw, index, K, rng)
        pairs[i * K:(i + 1) * K, 0] = matches
        pairs[i * K:(i + 1) * K, 1] = i
    return pairs


def discretized_truncated_normal(y, bound=TRUNCATION_BOUND):
    """Analytic distribution of round(y') for y' ~ N(y,1) on (-bound, bound).

    Returns (values, probabilities) covering every integer with positive
    mass; used as the closed-form reference for the match sampler.
    """
    lo, hi = int(math.ceil(-bound)), int(math.floor(bound))
    values = np.arange(lo, hi + 1)
    upper = np.minimum(values + 0.5, bound)
    lower = np.maximum(values - 0.5, -bound)
    cdf = np.vectorize(lambda x: 0.5 * (1.0 + math.erf((x - y) / math.sqrt(2.0))))
    mass = cdf(upper) - cdf(lower)
    z = cdf(np.array([bound]))[0] - cdf(np.array([-bound]))[0]
    return values, mass / z


class NormalizedRewardTable:
    """Exhaustive reward table over a tiny, fully enumerable domain.

    Holds every sequence x with its reward against a fixed target, the
    partition constant (the sum of all rewards), and the normalized
    distribution.  Intended for tests and sanity studies only; real tasks
    never enumerate their domain.
    """

    def __init__(self, sequences, rewards):
        self.sequences = list(sequences)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        if len(self.sequences) != len(self.rewards):
            raise ValueError("one reward per sequence required")
        if np.any(self.rewards < 0):
            raise ValueError("rewards must be non-negative")
        self.partition = float(self.rewards.sum())
        if self.partition <= 0:
            raise NoSupportError("all rewards are zero")
        self.normalized = self.rewards / self.partition

    @classmethod
    def from_reward_fn(cls, sequences, reward_fn):
        return cls(sequences, [reward_fn(s) for s in sequences])


def enumerate_token_strings(alphabet, max_len):
    """All strings over the alphabet with length 1..max_len."""
    out = []
    frontier = [""]
    for _ in range(max_len):
        frontier = [s + ch for s in frontier for ch in alphabet]
        out.extend(frontier)
    return out
