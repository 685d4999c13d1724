"""Command-line surface: data generation, index building, training,
evaluation, augmentation, and the entropy-estimator benchmark.

Every command writes a manifest.json into its output directory recording
the command, seed, input hashes, and outputs, so any artifact can be
regenerated from its manifest.  Exit codes: 0 ok, 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

DATA_DIR_ENV = "REWARDMATCH_DATA_DIR"
_THREAD_ENV_GUARD = "_REWARDMATCH_THREADS_SET"


class CliError(Exception):
    """Configuration or lineage problem with a dedicated exit code."""

    def __init__(self, message, code=EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


def _file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir, command, args_dict, inputs, outputs, t_start,
                    extra=None):
    from . import __version__
    manifest = dict(extra or {})
    manifest.update({
        "command": command,
        "arguments": args_dict,
        "input_hashes": inputs,
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "wall_clock_seconds": round(time.time() - t_start, 3),
    })
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _parse_config_file(path):
    """key = value lines, # comments; keys mirror TrainConfig fields."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'", EXIT_USAGE)
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(value, target_type):
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if target_type is int or target_type == "int | None":
        return int(value)
    if target_type is float:
        return float(value)
    return value


def _load_train_config(args):
    from .training import TrainConfig
    import dataclasses
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    if args.config:
        raw = _parse_config_file(args.config)
        for key, text in raw.items():
            if key in ("embed_dim", "hidden_dim", "num_layers", "max_len"):
                continue       # model keys are read separately
            if key not in fields:
                raise CliError(f"unknown config key {key!r}", EXIT_USAGE)
            ftype = fields[key].type
            try:
                values[key] = _coerce(text, {"int": int, "float": float,
                                             "bool": bool, "str": str,
                                             "int | None": int}.get(ftype, str))
            except ValueError as exc:
                raise CliError(f"bad value for {key}: {exc}", EXIT_USAGE) from None
    # flags win over config-file values
    for key in ("batch_size", "max_epochs", "lr", "entropy_weight",
                "samples_per_target", "max_steps", "val_targets"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    values["objective"] = args.objective.replace("-", "_")
    values["seed"] = args.seed
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}", EXIT_USAGE) from None


def _model_config_from(args, vocab_size):
    from .model import ModelConfig
    overrides = {}
    if args.config:
        raw = _parse_config_file(args.config)
        for key in ("embed_dim", "hidden_dim", "num_layers", "max_len"):
            if key in raw:
                overrides[key] = int(raw[key])
    for key in ("embed_dim", "hidden_dim", "num_layers", "max_len"):
        flag = getattr(args, key, None)
        if flag is not None:
            overrides[key] = flag
    return ModelConfig(vocab_size=vocab_size, cond_dim=1, **overrides)


def _data_dir(args):
    data = args.data or os.environ.get(DATA_DIR_ENV)
    if not data:
        raise CliError(f"--data not given and {DATA_DIR_ENV} unset", EXIT_USAGE)
    if not Path(data).is_dir():
        raise CliError(f"dataset directory not found: {data}")
    return Path(data)


def _load_data(args):
    from .dataset import load_splits, dataset_hash
    data = _data_dir(args)
    return load_splits(data), dataset_hash(data), data


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args):
    from .dataset import build_dataset, write_splits
    from .grammar import parse_pcfg, default_grammar_text
    t0 = time.time()
    if args.grammar:
        path = Path(args.grammar)
        if not path.exists():
            raise CliError(f"grammar file not found: {path}", EXIT_USAGE)
        grammar_text = path.read_text(encoding="utf-8")
    else:
        grammar_text = default_grammar_text()
    pcfg = parse_pcfg(grammar_text)
    splits = build_dataset(pcfg, args.n, (args.val, args.test), args.seed)
    out = Path(args.out)
    digest = write_splits(splits, out, grammar_text=grammar_text)
    # one manifest per directory: the dataset fields plus the run record
    _write_manifest(
        out, "gen-data",
        {"n": args.n, "val": args.val, "test": args.test, "seed": args.seed,
         "grammar": args.grammar or "<builtin>"},
        {"grammar_sha256": hashlib.sha256(grammar_text.encode()).hexdigest()},
        ["train.tsv", "valid.tsv", "test.tsv", "vocab.txt"],
        t0, extra=splits.manifest)
    counts = splits.manifest["counts"]
    print(f"wrote {out}: {counts['unique']} unique examples "
          f"(train {counts['train']}, valid {counts['validation']}, "
          f"test {counts['test']}), dataset hash {digest[:12]}")
    return EXIT_OK


def _index_path(data_dir):
    return Path(data_dir) / "match_index.bin"


def _load_or_build_index(splits, digest, data_dir, verbose=True):
    from .reward import MatchIndex, RewardSpec, build_match_index
    path = _index_path(data_dir)
    if path.exists():
        index = MatchIndex.load(path)
        if index.dataset_hash == digest:
            return index, False
    values = [ex.y_raw for ex in splits.train]
    index = build_match_index(train_values=values, spec=RewardSpec(),
                              dataset_hash=digest)
    index.save(path)
    if verbose:
        print(f"built match index ({len(index.buckets)} value buckets) -> {path}")
    return index, True


def cmd_index(args):
    t0 = time.time()
    splits, digest, data = _load_data(args)
    index, rebuilt = _load_or_build_index(splits, digest, data)
    _write_manifest(data, "index", {"data": str(data)},
                    {"dataset_sha256": digest},
                    [_index_path(data).name], t0)
    if not rebuilt:
        print(f"index up to date for dataset {digest[:12]}")
    return EXIT_OK


def cmd_train(args):
    from . import training
    from .training import (train_ml, train_surrogate, train_surrogate_entropy,
                           train_reinforce, train_raml_is,
                           make_gaussian_reward_fn, write_history_csv,
                           write_summary_json)
    t0 = time.time()
    splits, digest, data = _load_data(args)
    cfg = _load_train_config(args)
    model_cfg = _model_config_from(args, len(splits.vocabulary))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    objective = cfg.objective
    if objective == "ml":
        result = train_ml(splits, model_cfg, cfg)
    elif objective in ("surrogate", "surrogate_entropy"):
        index, _ = _load_or_build_index(splits, digest, data)
        trainer = (train_surrogate if objective == "surrogate"
                   else train_surrogate_entropy)
        result = trainer(splits, index, model_cfg, cfg)
    elif objective == "reinforce":
        warm = None
        if args.warm_start:
            from .model import ConditionalLSTM
            warm, meta = ConditionalLSTM.from_checkpoint(args.warm_start)
            if meta.get("dataset_sha256") not in (None, digest):
                raise CliError("warm-start checkpoint was trained on a "
                               "different dataset")
        result = train_reinforce(splits, make_gaussian_reward_fn(),
                                 model_cfg, cfg, warm_start_model=warm)
    elif objective == "raml_is":
        result = train_raml_is(splits, model_cfg, cfg)
    else:
        raise CliError(f"unhandled objective {objective}", EXIT_USAGE)

    ckpt = out / "checkpoint.bin"
    result.model.save_checkpoint(
        ckpt, extra_meta={"dataset_sha256": digest,
                          "train_config": cfg.to_dict()},
        include_optimizer=False)
    write_history_csv(result, out / "history.csv")
    write_summary_json(result, cfg, out / "summary.json")
    _write_manifest(out, "train",
                    {"objective": objective, "seed": cfg.seed,
                     "config": args.config, "data": str(data)},
                    {"dataset_sha256": digest},
                    ["checkpoint.bin", "history.csv", "summary.json"], t0)
    print(f"trained {objective}: best val error "
          f"{result.best_property_error:.3f} at epoch {result.best_epoch} "
          f"({len(result.history)} epochs, "
          f"{'early stop' if result.stopped_early else 'completed'})")
    return EXIT_OK


def cmd_eval(args):
    from .model import ConditionalLSTM
    from .metrics import conditional_eval_scalar
    import numpy as np
    t0 = time.time()
    splits, digest, data = _load_data(args)
    model, meta = ConditionalLSTM.from_checkpoint(args.checkpoint)
    recorded = meta.get("dataset_sha256")
    if recorded is not None and recorded != digest:
        raise CliError(
            f"lineage error: checkpoint was trained on dataset "
            f"{recorded[:12]}, but {data} has hash {digest[:12]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = splits.test
    if args.targets and args.targets < len(test):
        test = test[:args.targets]
    train_strings = {ex.expr for ex in splits.train}
    report = conditional_eval_scalar(
        model, test, splits.vocabulary, train_strings,
        S=args.samples, repeats=args.repeats,
        rng=np.random.default_rng(args.seed),
        metadata={"seed": args.seed,
                  "checkpoint_sha256": _file_sha256(args.checkpoint)})
    report.save(out / "report.json")
    _write_manifest(out, "eval",
                    {"checkpoint": args.checkpoint, "seed": args.seed,
                     "samples": args.samples, "repeats": args.repeats},
                    {"dataset_sha256": digest,
                     "checkpoint_sha256": _file_sha256(args.checkpoint)},
                    ["report.json"], t0)
    print(f"validity {report.validity:.4f}  mae {report.mae:.3f}  "
          f"exact {report.exact_accuracy:.3f}  "
          f"within3 {report.within_3_accuracy:.3f}  "
          f"nll/token {report.test_nll_per_token:.4f}")
    return EXIT_OK


def cmd_augment(args):
    from .augmentation import (AugmentConfig, augment_classic, augment_raml,
                               write_augmented_tsv)
    import numpy as np
    t0 = time.time()
    splits, digest, data = _load_data(args)
    cfg = AugmentConfig(per_instance_target=args.per_instance,
                        max_attempts=args.max_attempts,
                        distance_mode=args.distance_mode)
    fn = augment_classic if args.mode == "classic" else augment_raml
    records, stats = fn(splits.train, cfg, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_augmented_tsv(records, out / "augmented.tsv")
    _write_manifest(out, "augment",
                    {"mode": args.mode, "seed": args.seed, **stats},
                    {"dataset_sha256": digest}, ["augmented.tsv"], t0)
    print(f"{args.mode} augmentation: kept {stats['kept']} of "
          f"{stats['attempts']} attempts (shortfall {stats['shortfall']})")
    return EXIT_OK


def cmd_entropy_bench(args):
    from .model import ConditionalLSTM
    from .entropy import entropy_bench, write_bench_csv, write_bench_summary
    import numpy as np
    t0 = time.time()
    splits, digest, data = _load_data(args)
    model, meta = ConditionalLSTM.from_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    target = splits.test[int(rng.integers(len(splits.test)))]
    sample_sizes = tuple(int(s) for s in args.S.split(","))
    rows, summary = entropy_bench(model, target.y_cond, trials=args.trials,
                                  sample_sizes=sample_sizes, rng=rng,
                                  max_len=model.config.max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(rows, out / "entropy_bench.csv")
    write_bench_summary(summary, out / "entropy_bench.json")
    _write_manifest(out, "entropy-bench",
                    {"trials": args.trials, "S": args.S, "seed": args.seed,
                     "target_value": int(target.y_raw)},
                    {"dataset_sha256": digest,
                     "checkpoint_sha256": _file_sha256(args.checkpoint)},
                    ["entropy_bench.csv", "entropy_bench.json"], t0)
    print(f"benchmarked {len(rows)} trials -> {out}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rewardmatch",
        description="Conditional sequence generation by reward-matched "
                    "likelihood: data generation, training, evaluation.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads for this process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample the grammar into dataset files")
    p.add_argument("--grammar", help="grammar file (default: builtin)")
    p.add_argument("--n", type=int, required=True,
                   help="number of successful derivations to draw")
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("index", help="build the scalar match index")
    p.add_argument("--data")
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--objective", required=True,
                   choices=["ml", "surrogate", "surrogate-entropy",
                            "reinforce", "raml-is"])
    p.add_argument("--data")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warm-start", help="checkpoint for reinforce warm start")
    for flag, ftype in [("batch_size", int), ("max_epochs", int),
                        ("lr", float), ("entropy_weight", float),
                        ("samples_per_target", int), ("max_steps", int),
                        ("val_targets", int), ("embed_dim", int),
                        ("hidden_dim", int), ("num_layers", int),
                        ("max_len", int)]:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=ftype,
                       default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=25)
    p.add_argument("--repeats", type=int, default=6)
    p.add_argument("--targets", type=int, default=None,
                   help="evaluate only the first N test targets")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("augment", help="build an augmented training set")
    p.add_argument("--data")
    p.add_argument("--mode", choices=["classic", "raml"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--per-instance", dest="per_instance", type=int, default=10)
    p.add_argument("--max-attempts", dest="max_attempts", type=int, default=500)
    p.add_argument("--distance-mode", dest="distance_mode",
                   choices=["exponential", "count_weighted"],
                   default="count_weighted")
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("entropy-bench", help="compare entropy estimators")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=15)
    p.add_argument("--S", default="1,10,50",
                   help="comma-separated Monte Carlo sample sizes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_entropy_bench)

    return parser


def _apply_threads(argv):
    """Re-exec with BLAS thread env vars when --threads is requested.

    BLAS libraries read their thread count at load time, so the cap must
    be in the environment before numpy is imported anywhere.
    """
    if "--threads" not in argv or os.environ.get(_THREAD_ENV_GUARD):
        return
    idx = argv.index("--threads")
    try:
        n = int(argv[idx + 1])
    except (IndexError, ValueError):
        return      # argparse will report the usage error
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = str(n)
    env[_THREAD_ENV_GUARD] = "1"
    os.execve(sys.executable, [sys.executable, "-m", "rewardmatch.cli"] + argv, env)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
