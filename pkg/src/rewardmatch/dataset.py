"""Dataset pipeline: sample the grammar, evaluate, filter, dedup, split.

On-disk layout of a dataset directory::

    train.tsv / valid.tsv / test.tsv   one "<expression>\\t<value>" per line
    vocab.txt                          one token per line, index = line number
    manifest.json                      seed, counts, grammar hash

Conditioning inputs are the integer values rescaled by 1/1000 so every
component lies strictly inside (-1, 1).
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluator import eval_expr
from .grammar import DerivationBudget, sample_derivation

__all__ = [
    "PAD_TOKEN",
    "START_TOKEN",
    "STOP_TOKEN",
    "COND_SCALE",
    "Vocabulary",
    "LabeledExample",
    "DatasetSplits",
    "InsufficientExamplesError",
    "build_dataset",
    "write_splits",
    "load_splits",
    "dataset_hash",
]

PAD_TOKEN = "<pad>"
START_TOKEN = "<s>"
STOP_TOKEN = "</s>"
COND_SCALE = 1000.0

FORMAT_VERSION = 1


class InsufficientExamplesError(RuntimeError):
    pass


class Vocabulary:
    """Character-level token table with padding/start/stop specials."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for special in (PAD_TOKEN, START_TOKEN, STOP_TOKEN):
            if special not in self.index:
                raise ValueError(f"vocabulary is missing {special}")
        self.pad_id = self.index[PAD_TOKEN]
        self.start_id = self.index[START_TOKEN]
        self.stop_id = self.index[STOP_TOKEN]

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_chars(cls, chars):
        return cls([PAD_TOKEN, START_TOKEN, STOP_TOKEN] + sorted(set(chars)))

    def encode(self, s):
        """String -> [START, chars..., STOP] token ids."""
        try:
            body = [self.index[ch] for ch in s]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None
        return np.array([self.start_id] + body + [self.stop_id], dtype=np.int64)

    def decode(self, tokens):
        """Inverse of encode; raises on malformed sequences."""
        tokens = list(np.asarray(tokens))
        if len(tokens) < 2 or tokens[0] != self.start_id:
            raise ValueError("token sequence does not begin with the start token")
        if tokens[-1] != self.stop_id:
            raise ValueError("token sequence does not end with the stop token")
        chars = []
        for t in tokens[1:-1]:
            if not 0 <= t < len(self.tokens):
                raise ValueError(f"token id {t} out of range")
            tok = self.tokens[t]
            if tok in (PAD_TOKEN, START_TOKEN, STOP_TOKEN):
                raise ValueError(f"special token {tok} inside the sequence body")
            chars.append(tok)
        return "".join(chars)

    def decode_generated(self, tokens):
        """Decode a model sample; None for truncated/malformed sequences."""
        try:
            return self.decode(tokens)
        except ValueError:
            return None

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass
class LabeledExample:
    """One (expression, property, conditioning vector) training record."""

    expr: str
    tokens: np.ndarray
    y_raw: int
    y_cond: np.ndarray


@dataclass
class DatasetSplits:
    train: list
    validation: list
    test: list
    vocabulary: Vocabulary
    manifest: dict = field(default_factory=dict)


def _make_example(expr, value, vocab):
    return LabeledExample(
        expr=expr,
        tokens=vocab.encode(expr),
        y_raw=value,
        y_cond=np.array([value / COND_SCALE], dtype=np.float64),
    )


def build_dataset(pcfg, n_samples, split_sizes, seed, budget=None):
    """Sample, filter, dedup, and split; fully determined by the seed.

    n_samples counts expressions that survive the validity filters (length,
    range, evaluation): raw derivations are drawn until that many survive.
    Budget-exceeded derivations are discarded and resampled.  split_sizes
    is (validation, test); the remainder of the unique valid expressions
    becomes the training split.
    """
    if budget is None:
        budget = DerivationBudget()
    val_n, test_n = split_sizes
    seq = np.random.SeedSequence(seed)
    derive_seed, shuffle_seed = seq.spawn(2)
    derive_rng = random.Random(int(derive_seed.generate_state(1)[0]))

    seen = {}
    n_budget_exceeded = 0
    n_raw = 0
    n_valid = 0
    while n_valid < n_samples:
        s = sample_derivation(pcfg, budget, derive_rng)
        if s is None:
            n_budget_exceeded += 1
            continue
        n_raw += 1
        outcome = eval_expr(s)
        if not outcome.ok:
            continue
        n_valid += 1
        if s not in seen:
            seen[s] = outcome.value

    unique = list(seen.items())
    if len(unique) <= val_n + test_n:
        raise InsufficientExamplesError(
            f"only {len(unique)} unique examples; need more than "
            f"{val_n + test_n} for the requested splits")

    shuffle_rng = np.random.default_rng(shuffle_seed)
    order = shuffle_rng.permutation(len(unique))
    unique = [unique[i] for i in order]

    vocab = Vocabulary.from_chars("".join(s for s, _ in unique))
    examples = [_make_example(s, v, vocab) for s, v in unique]
    splits = DatasetSplits(
        train=examples[val_n + test_n:],
        validation=examples[:val_n],
        test=examples[val_n:val_n + test_n],
        vocabulary=vocab,
        manifest={
            "format_version": FORMAT_VERSION,
            "seed": seed,
            "counts": {
                "valid_samples": n_samples,
                "raw_derivations": n_raw,
                "budget_exceeded": n_budget_exceeded,
                "unique": len(unique),
                "train": len(unique) - val_n - test_n,
                "validation": val_n,
                "test": test_n,
            },
        },
    )
    return splits


def _write_tsv(path, examples):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.expr}\t{ex.y_raw}\n")


def _read_tsv(path, vocab):
    examples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        try:
            expr, value = line.split("\t")
            examples.append(_make_example(expr, int(value), vocab))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed record {line!r}") from None
    return examples


def write_splits(splits, out_dir, grammar_text=None):
    """Write TSVs, vocab, and manifest; returns the dataset hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_tsv(out / "train.tsv", splits.train)
    _write_tsv(out / "valid.tsv", splits.validation)
    _write_tsv(out / "test.tsv", splits.test)
    splits.vocabulary.save(out / "vocab.txt")
    manifest = dict(splits.manifest)
    if grammar_text is not None:
        manifest["grammar_sha256"] = hashlib.sha256(
            grammar_text.encode("utf-8")).hexdigest()
    manifest["dataset_sha256"] = dataset_hash(out)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    splits.manifest = manifest
    return manifest["dataset_sha256"]


def load_splits(data_dir):
    data = Path(data_dir)
    vocab = Vocabulary.load(data / "vocab.txt")
    manifest = {}
    manifest_path = data / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return DatasetSplits(
        train=_read_tsv(data / "train.tsv", vocab),
        validation=_read_tsv(data / "valid.tsv", vocab),
        test=_read_tsv(data / "test.tsv", vocab),
        vocabulary=vocab,
        manifest=manifest,
    )


def dataset_hash(data_dir):
    """sha256 over the split files and vocabulary, hex digest."""
    h = hashlib.sha256()
    data = Path(data_dir)
    for name in ("train.tsv", "valid.tsv", "test.tsv", "vocab.txt"):
        h.update(name.encode())
        h.update((data / name).read_bytes())
    return h.hexdigest()
