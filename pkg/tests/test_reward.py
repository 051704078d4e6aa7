import math

import numpy as np
import pytest

from dynbeta.core import BetaConfig, BetaMode, assign_betas
from dynbeta.data import PairRatioConfig, SynthConfig, corrupt_to_pairs, generate_questions
from dynbeta.errors import ConfigError, DataError, TrainingError
from dynbeta.judge import JudgeConfig, attach_scores, oracle_scores
from dynbeta.reward import (
    RewardModel,
    RmTrainConfig,
    bt_gradient,
    bt_loss,
    bt_probability,
    calibrate_offset,
    load_reward_model,
    question_margins,
    rm_pairwise_accuracy,
    save_reward_model,
    train_reward_model,
)


def scored_pairs(questions, ratio=PairRatioConfig()):
    return attach_scores(corrupt_to_pairs(questions, ratio), oracle_scores(questions, JudgeConfig()))


def fd_gradient(model, pairs, l2, betas, h=1e-5):
    theta = model.flat()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (bt_loss(model.with_flat(up), pairs, l2, betas) - bt_loss(model.with_flat(dn), pairs, l2, betas)) / (2 * h)
    return grad


def flat_grad(model, grads):
    return np.concatenate([np.ravel(grads[k]) for k in sorted(model.params)])


def test_flat_order_matches_gradient_order():
    m = RewardModel.init("mlp", 4, 3, 0.5, seed=1)
    assert np.array_equal(m.with_flat(m.flat()).flat(), m.flat())
    assert flat_grad(m, m.params).shape == m.flat().shape
    assert np.array_equal(flat_grad(m, m.params), m.flat())


@pytest.mark.parametrize("arch", ["linear", "mlp"])
@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_central_differences(arch, seed, small_questions):
    rng = np.random.default_rng(seed)
    pairs = scored_pairs(small_questions[:16])
    betas = rng.uniform(0.05, 1.0, len(pairs))
    model = RewardModel.init(arch, small_questions[0].dim, 8, 0.5, seed=seed)
    analytic = flat_grad(model, bt_gradient(model, pairs, l2=1e-3, betas=betas))
    numeric = fd_gradient(model, pairs, 1e-3, betas)
    rel = np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6))
    assert rel < 1e-4


def test_loss_matches_direct_formula(small_questions):
    pairs = assign_betas(scored_pairs(small_questions[:10]), BetaConfig(BetaMode.DYNAMIC))
    w = np.linspace(-1, 1, small_questions[0].dim)
    model = RewardModel.linear(w)
    expected = np.mean([
        -math.log(1 / (1 + math.exp(-p.beta * (w @ p.chosen.features - w @ p.rejected.features))))
        for p in pairs
    ]) + 0.01 * float(w @ w)
    assert bt_loss(model, pairs, l2=0.01) == pytest.approx(expected, rel=1e-12)


def test_bt_probability():
    assert bt_probability(0.0, 0.0, 1.0) == 0.5
    assert bt_probability(1.0, 0.0, 0.0) == 0.5
    assert bt_probability(2.0, 0.0, 0.5) == pytest.approx(1 / (1 + math.exp(-1.0)))


def test_unit_betas_equal_unweighted(small_questions):
    pairs = scored_pairs(small_questions)
    ones = assign_betas(pairs, BetaConfig(BetaMode.FIXED, fixed_value=1.0))
    cfg = RmTrainConfig(epochs=2)
    a = train_reward_model(ones, cfg).model
    b = train_reward_model(pairs, cfg, betas=np.ones(len(pairs))).model
    assert a.param_bytes() == b.param_bytes()


def test_missing_betas_rejected(small_questions):
    with pytest.raises(DataError):
        train_reward_model(scored_pairs(small_questions[:4]))


def test_training_learns_clean_preferences():
    questions, _ = generate_questions(SynthConfig(num_questions=200))
    pairs = assign_betas(scored_pairs(questions, PairRatioConfig(gt_pairs=1, cb_pairs=0)),
                         BetaConfig(BetaMode.FIXED, fixed_value=1.0))
    for arch in ("linear", "mlp"):
        result = train_reward_model(pairs, RmTrainConfig(arch=arch))
        assert result.epoch_losses[-1] < result.epoch_losses[0]
        assert rm_pairwise_accuracy(result.model, questions) > 0.95


def test_dynamic_weights_resist_corruption():
    questions, _ = generate_questions(SynthConfig(num_questions=200))
    pairs = scored_pairs(questions, PairRatioConfig(gt_pairs=1, cb_pairs=3))
    fixed = train_reward_model(assign_betas(pairs, BetaConfig(BetaMode.FIXED)), RmTrainConfig()).model
    dyn = train_reward_model(assign_betas(pairs, BetaConfig(BetaMode.DYNAMIC)), RmTrainConfig()).model
    assert rm_pairwise_accuracy(fixed, questions) < 0.5
    assert rm_pairwise_accuracy(dyn, questions) > 0.9


def test_training_is_deterministic(small_questions):
    pairs = assign_betas(scored_pairs(small_questions), BetaConfig(BetaMode.DYNAMIC))
    a = train_reward_model(pairs, RmTrainConfig(arch="mlp"))
    b = train_reward_model(pairs, RmTrainConfig(arch="mlp"))
    assert a.model.param_bytes() == b.model.param_bytes() and a.epoch_losses == b.epoch_losses


def test_grad_accum_counts_optimizer_steps(small_questions):
    pairs = assign_betas(scored_pairs(small_questions[:20]), BetaConfig(BetaMode.FIXED))
    assert train_reward_model(pairs, RmTrainConfig(epochs=1, batch_size=8)).steps == 10
    assert train_reward_model(pairs, RmTrainConfig(epochs=1, batch_size=8, grad_accum=4)).steps == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_step(small_questions):
    pairs = assign_betas(scored_pairs(small_questions[:20]), BetaConfig(BetaMode.FIXED))
    with pytest.raises(TrainingError, match="step"):
        train_reward_model(pairs, RmTrainConfig(learning_rate=1e308, l2=1.0, init_scale=1.0))


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0),
                                 dict(l2=-1.0), dict(arch="cnn")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        RmTrainConfig(**bad)


def test_offset_is_mean_score(small_questions):
    model = RewardModel.linear(np.arange(small_questions[0].dim, dtype=float))
    offset = calibrate_offset(model, small_questions)
    X = np.stack([q.gt_response.features for q in small_questions] + [q.cb_response.features for q in small_questions])
    assert offset == pytest.approx(float(np.mean(X @ model.params["w"])), rel=1e-12)
    # cached unless forced
    assert calibrate_offset(model, small_questions[:5]) == offset
    assert calibrate_offset(model, small_questions[:5], force=True) != offset
    assert np.allclose(model.centered_score(X[:3]), model.score(X[:3]) - model.offset)


def test_centered_score_needs_offset():
    with pytest.raises(TrainingError):
        RewardModel.linear(np.ones(3)).centered_score(np.ones(3))


def test_checkpoint_round_trip(tmp_path, small_questions):
    model = RewardModel.init("mlp", small_questions[0].dim, 8, 0.3, seed=2)
    calibrate_offset(model, small_questions)
    path = tmp_path / "rm.json"
    save_reward_model(model, path)
    loaded = load_reward_model(path, small_questions[0].dim)
    assert loaded.param_bytes() == model.param_bytes() and loaded.offset == model.offset
    assert np.array_equal(question_margins(loaded, small_questions), question_margins(model, small_questions))
    with pytest.raises(DataError, match="dimension"):
        load_reward_model(path, small_questions[0].dim + 1)
    with pytest.raises(DataError, match="not found"):
        load_reward_model(tmp_path / "missing.json")


def test_accuracy_counts_ties_half(small_questions):
    assert rm_pairwise_accuracy(RewardModel.linear(np.zeros(small_questions[0].dim)), small_questions) == 0.5
