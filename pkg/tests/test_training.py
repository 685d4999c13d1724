import numpy as np
import pytest

from rewardmatch.dataset import build_dataset
from rewardmatch.grammar import load_default_grammar
from rewardmatch.model import ConditionalLSTM, ModelConfig, pad_batch
from rewardmatch.reward import (GAUSSIAN_SCALAR, MatchIndex, RewardSpec,
                                build_match_index)
from rewardmatch.training import (TrainConfig, TrainingDiverged, ValMetric,
                                  early_stop, make_gaussian_reward_fn,
                                  train_ml, train_raml_is, train_reinforce,
                                  train_surrogate, train_surrogate_entropy,
                                  write_history_csv, write_summary_json)


@pytest.fixture(scope="module")
def splits():
    return build_dataset(load_default_grammar(), 4000, (150, 100), seed=88)


@pytest.fixture(scope="module")
def model_cfg(splits):
    return ModelConfig(vocab_size=len(splits.vocabulary), embed_dim=12,
                       cond_dim=1, hidden_dim=24, num_layers=2, max_len=32)


def cfg_for(objective, **kw):
    base = dict(objective=objective, batch_size=16, max_epochs=1, seed=5,
                val_targets=40)
    base.update(kw)
    return TrainConfig(**base)


# -- early stopping -----------------------------------------------------------

def test_early_stop_examples():
    def hist(errs):
        return [ValMetric(i + 1, e, 0.0) for i, e in enumerate(errs)]
    assert early_stop(hist([10, 9, 8, 17]), factor=2)
    assert not early_stop(hist([10, 9, 8, 15.9]), factor=2)
    assert not early_stop(hist([10, 9, 8, 7]), factor=2)
    assert early_stop(hist([10, 21]), factor=2)
    assert not early_stop([], factor=2)


def test_monotone_errors_never_stop():
    metrics = [ValMetric(i + 1, 100.0 / (i + 1), 0.0) for i in range(50)]
    for k in range(1, 51):
        assert not early_stop(metrics[:k], factor=2)


# -- config validation -----------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(objective="nope")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(early_stop_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(entropy_weight=-0.1)


# -- maximum likelihood ------------------------------------------------------------

def test_ml_memorizes_single_example(splits):
    # training NLL on a one-example dataset collapses within 200 steps
    from rewardmatch.neural import adam_step
    one = [ex for ex in splits.train if len(ex.expr) <= 8][0]
    mcfg = ModelConfig(vocab_size=len(splits.vocabulary), embed_dim=16,
                       cond_dim=1, hidden_dim=32, num_layers=1, max_len=32)
    model = ConditionalLSTM(mcfg, rng=np.random.default_rng(0),
                            start_id=splits.vocabulary.start_id,
                            stop_id=splits.vocabulary.stop_id)
    padded, lengths = pad_batch([one.tokens], splits.vocabulary.pad_id)
    cond = one.y_cond.reshape(1, -1)
    loss = np.inf
    for _ in range(200):
        model.params.zero_grads()
        loss = model.training_step(padded, lengths, cond)
        model.params.clip_grad_norm(5.0)
        adam_step(model.params, lr=0.01)
    assert loss / (len(one.tokens) - 1) < 0.01


def build_like(splits, train):
    from rewardmatch.dataset import DatasetSplits
    return DatasetSplits(train=train, validation=splits.validation[:5],
                         test=splits.test[:5], vocabulary=splits.vocabulary)


def test_ml_reproducible_history(splits, model_cfg):
    cfg = cfg_for("ml", max_epochs=2)
    a = train_ml(splits, model_cfg, cfg)
    b = train_ml(splits, model_cfg, cfg)
    assert [(e, l, m.property_error, m.nll) for e, l, m in a.history] == \
           [(e, l, m.property_error, m.nll) for e, l, m in b.history]
    for name in a.model.params.names:
        assert np.array_equal(a.model.params[name], b.model.params[name])


def test_ml_loss_decreases(splits, model_cfg):
    cfg = cfg_for("ml", max_epochs=3)
    result = train_ml(splits, model_cfg, cfg)
    losses = [l for _, l, _ in result.history]
    assert losses[-1] < losses[0]
    assert all(np.isfinite(l) for l in losses)


# -- surrogate ----------------------------------------------------------------------

def test_surrogate_with_degenerate_index_equals_ml(splits, model_cfg,
                                                   monkeypatch):
    # the degenerate case: each target matches exactly its own example with
    # probability 1 and K=1, so the expanded pair set IS the original set
    # and the whole trajectory must collapse to maximum likelihood
    from rewardmatch import training as tr
    sub = build_like(splits, splits.train[:400])
    cfg = cfg_for("surrogate", max_epochs=2, samples_per_target=1)

    def point_mass_presample(examples, index, K, rng):
        n = len(examples)
        pairs = np.empty((n * K, 2), dtype=np.int64)
        for i in range(n):
            pairs[i * K:(i + 1) * K] = i
        return pairs

    monkeypatch.setattr(tr, "presample_training_pairs", point_mass_presample)
    res_sur = tr.train_surrogate(sub, object(), model_cfg, cfg)
    res_ml = train_ml(sub, model_cfg, cfg_for("ml", max_epochs=2))
    hist_sur = [(e, l) for e, l, _ in res_sur.history]
    hist_ml = [(e, l) for e, l, _ in res_ml.history]
    assert len(hist_sur) == len(hist_ml)
    for (e1, l1), (e2, l2) in zip(hist_sur, hist_ml):
        assert l1 == pytest.approx(l2, abs=1e-12)
    for name in res_sur.model.params.names:
        assert np.allclose(res_sur.model.params[name],
                           res_ml.model.params[name], atol=1e-12)


def test_surrogate_batch_gradient_matches_manual_accumulation(splits, model_cfg):
    # one surrogate batch gradient equals (1/K) sum of per-pair NLL gradients
    model = ConditionalLSTM(model_cfg, rng=np.random.default_rng(0),
                            start_id=splits.vocabulary.start_id,
                            stop_id=splits.vocabulary.stop_id)
    K = 3
    targets = splits.train[:2]
    matches = splits.train[2:2 + 2 * K]
    pairs = [(matches[i * K + k].tokens, targets[i].y_cond)
             for i in range(2) for k in range(K)]
    padded, lengths = pad_batch([t for t, _ in pairs], splits.vocabulary.pad_id)
    conds = np.stack([c for _, c in pairs])
    model.params.zero_grads()
    model.training_step(padded, lengths, conds)    # mean over B*K pairs
    batch_grads = {n: g.copy() for n, g in model.params.grads.items()}

    manual = {n: np.zeros_like(g) for n, g in model.params.grads.items()}
    for tokens, cond in pairs:
        model.params.zero_grads()
        p, l = pad_batch([tokens], splits.vocabulary.pad_id)
        model.training_step(p, l, cond.reshape(1, -1))
        for n in manual:
            manual[n] += model.params.grads[n] / len(pairs)
    for n in manual:
        assert np.allclose(batch_grads[n], manual[n], atol=1e-10)


def test_surrogate_runs_with_real_index(splits, model_cfg):
    index = build_match_index(train_values=[ex.y_raw for ex in splits.train],
                              spec=RewardSpec())
    cfg = cfg_for("surrogate", samples_per_target=2)
    result = train_surrogate(splits, index, model_cfg, cfg)
    assert len(result.history) == 1
    assert np.isfinite(result.history[0][1])


def test_surrogate_resample_mode_differs(splits, model_cfg):
    index = build_match_index(train_values=[ex.y_raw for ex in splits.train],
                              spec=RewardSpec())
    pre = train_surrogate(splits, index, model_cfg,
                          cfg_for("surrogate", samples_per_target=2,
                                  max_epochs=2, presample=True))
    fresh = train_surrogate(splits, index, model_cfg,
                            cfg_for("surrogate", samples_per_target=2,
                                    max_epochs=2, presample=False))
    assert pre.history[1][1] != fresh.history[1][1]


# -- entropy-regularized surrogate -----------------------------------------------------

def test_zero_entropy_weight_rejected(splits, model_cfg):
    index = build_match_index(train_values=[ex.y_raw for ex in splits.train],
                              spec=RewardSpec())
    with pytest.raises(ValueError):
        train_surrogate_entropy(splits, index, model_cfg,
                                cfg_for("surrogate_entropy", entropy_weight=0.0))


def test_entropy_term_changes_trajectory_and_stays_finite(splits, model_cfg):
    index = build_match_index(train_values=[ex.y_raw for ex in splits.train],
                              spec=RewardSpec())
    plain = train_surrogate(splits, index, model_cfg,
                            cfg_for("surrogate", samples_per_target=1))
    reg = train_surrogate_entropy(splits, index, model_cfg,
                                  cfg_for("surrogate_entropy",
                                          samples_per_target=1,
                                          entropy_weight=0.01))
    assert plain.history[0][1] != reg.history[0][1]
    assert np.isfinite(reg.history[0][1])


# -- reinforce ---------------------------------------------------------------------

def test_reinforce_zero_reward_keeps_parameters(splits, model_cfg):
    warm = ConditionalLSTM(model_cfg, rng=np.random.default_rng(1),
                           start_id=splits.vocabulary.start_id,
                           stop_id=splits.vocabulary.stop_id)
    before = {n: warm.params[n].copy() for n in warm.params.names}
    cfg = cfg_for("reinforce", reinforce_samples=3, max_steps=10)
    result = train_reinforce(splits, lambda s, y: 0.0, model_cfg, cfg,
                             warm_start_model=warm)
    after = result.model.params
    for name in after.names:
        assert np.array_equal(after[name], before[name])
    assert result.counters["skipped_batches"] >= 1


def test_reinforce_bandit_learns_target_token():
    # single-step bandit driving the update rule directly: vocab
    # {pad, start, stop, a, b}, reward 1 exactly when the sample is "a"
    from rewardmatch.dataset import Vocabulary
    from rewardmatch.neural import adam_step
    vocab = Vocabulary(["<pad>", "<s>", "</s>", "a", "b"])
    mcfg = ModelConfig(vocab_size=5, embed_dim=4, cond_dim=1, hidden_dim=8,
                       num_layers=1, max_len=4)
    model = ConditionalLSTM(mcfg, rng=np.random.default_rng(0))
    rng = np.random.default_rng(2)
    conds = np.zeros((64, 1))
    for _ in range(500):
        sampled = model.sample_batch(conds, rng)
        kept, rewards = [], []
        for tokens in sampled:
            s = vocab.decode_generated(tokens)
            if s is None:
                continue                        # invalid samples discarded
            kept.append(tokens)
            rewards.append(1.0 if s == "a" else 0.0)
        if not kept or not any(rewards):
            continue
        weights = np.asarray(rewards) / len(rewards)
        padded, lengths = pad_batch(kept, vocab.pad_id)
        model.params.zero_grads()
        model.training_step(padded, lengths, np.zeros((len(kept), 1)),
                            weights)
        model.params.clip_grad_norm(5.0)
        adam_step(model.params, lr=0.01)
    dist = model.step_distribution(np.array([1]), np.array([0.0]))
    assert dist[3] > 0.9


def test_reinforce_discards_invalid_and_counts(splits, model_cfg):
    cfg = cfg_for("reinforce", reinforce_samples=4, max_steps=8,
                  warm_start_epochs=1)
    result = train_reinforce(splits, make_gaussian_reward_fn(), model_cfg, cfg)
    assert result.counters["reinforce_steps"] == 8
    assert result.counters["discarded_invalid"] > 0


# -- raml importance sampling ----------------------------------------------------------

def test_raml_weights_are_normalized_per_target(splits, model_cfg, monkeypatch):
    captured = []
    from rewardmatch import training as tr
    orig = ConditionalLSTM.training_step

    def spy(self, padded, lengths, conds, weights=None):
        if weights is not None:
            captured.append(weights.copy())
        return orig(self, padded, lengths, conds, weights)

    monkeypatch.setattr(ConditionalLSTM, "training_step", spy)
    cfg = cfg_for("raml_is", batch_size=4, raml_proposals=6)
    train_raml_is(splits, model_cfg, cfg)
    assert captured
    for w in captured:
        # weights sum to (targets contributing)/batch; each target row sums
        # to 1/batch before scaling, so the total is at most 1
        assert w.sum() <= 1.0 + 1e-9
        assert np.all(w >= 0)


def test_raml_reports_zero_reward_fraction(splits, model_cfg):
    cfg = cfg_for("raml_is", batch_size=8, raml_proposals=5)
    result = train_raml_is(splits, model_cfg, cfg)
    c = result.counters
    assert c["proposals"] > 0
    assert 0.5 < c["zero_reward"] / c["proposals"] <= 1.0   # mostly wasted


def test_raml_m_zero_proposals_reduce_to_ml(splits, model_cfg, monkeypatch):
    # force every sampled edit distance to zero: proposals equal the source,
    # rewards are all 1, weights collapse to uniform over duplicates
    from rewardmatch import training as tr
    monkeypatch.setattr(tr, "sample_edit_distance", lambda *a, **k: 0)
    sub = build_like(splits, splits.train[:64])
    cfg = cfg_for("raml_is", batch_size=8, raml_proposals=2, max_epochs=1)
    result = train_raml_is(sub, model_cfg, cfg)
    ml = train_ml(sub, model_cfg, cfg_for("ml", batch_size=8, max_epochs=1))
    assert result.history[0][1] == pytest.approx(ml.history[0][1], abs=1e-9)


# -- divergence handling ------------------------------------------------------------

def test_non_finite_loss_raises_with_batch(splits, model_cfg):
    # the bounded lstm + adam never blow up from a big lr alone, so inject
    # the corruption at the data boundary and expect the halt + batch dump
    from rewardmatch.dataset import LabeledExample
    src = splits.train[7]
    bad = LabeledExample(expr=src.expr, tokens=src.tokens, y_raw=src.y_raw,
                         y_cond=np.array([np.nan]))
    poisoned = build_like(splits, splits.train[:7] + [bad]
                          + splits.train[8:64])
    cfg = cfg_for("ml", max_epochs=1)
    with pytest.raises((TrainingDiverged, FloatingPointError)) as exc:
        train_ml(poisoned, model_cfg, cfg)
    if isinstance(exc.value, TrainingDiverged):
        assert exc.value.batch is not None


# -- artifacts ---------------------------------------------------------------------

def test_history_and_summary_files(tmp_path, splits, model_cfg):
    cfg = cfg_for("ml", max_epochs=2)
    result = train_ml(splits, model_cfg, cfg)
    write_history_csv(result, tmp_path / "history.csv")
    write_summary_json(result, cfg, tmp_path / "summary.json")
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_error,val_nll"
    assert len(lines) == 3
    import json
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["epochs_run"] == 2
    assert summary["config"]["objective"] == "ml"
