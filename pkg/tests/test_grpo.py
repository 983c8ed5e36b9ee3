import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_softmax

from reason_restore.degrade import FogParams, SamplerConfig, apply_fog, degrade, sample_recipe
from reason_restore.diagnose import DiagnosticReport
from reason_restore.grpo import (CheckpointError, GroupInputs, GrpoGroup, Sample, TrainConfig,
                                 advantages, checkpoint_text, diagnostic_reward, ebm_oracle_check,
                                 fidelity_log_probs, grpo_loss, loss_gradient, parse_checkpoint,
                                 read_checkpoint, train, write_checkpoint)
from reason_restore.imgcore import Rng
from reason_restore.restore import (DEFAULT_EXPLORATION_STD, LOWER, UPPER, RestorationParams, RestorationPolicy,
                                    restore, sample_noise)
from reason_restore.scenes import random_scene

from fuzz import random_state, state_fields

FOG_ONLY = SamplerConfig(p_fog=1, p_shake=0, p_rain=0, p_noise=0)


# --- fidelity distribution -----------------------------------------------------------

def test_equal_errors_are_uniform():
    np.testing.assert_allclose(fidelity_log_probs([0.2, 0.2, 0.2], 0.1), [math.log(1 / 3)] * 3, atol=1e-15)


def test_three_to_one_odds():
    np.testing.assert_allclose(np.exp(fidelity_log_probs([0.0, math.log(3)], 1.0)), [0.75, 0.25], atol=1e-15)


@given(st.lists(st.floats(0, 10), min_size=2, max_size=8))
def test_hot_limit_is_uniform(e):
    tau = 1e6 * max(max(e), 1e-300)
    p = np.exp(fidelity_log_probs(e, tau))
    np.testing.assert_allclose(p, 1 / len(e), atol=1e-6)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=8), st.floats(1e-4, 10))
def test_log_probs_normalized(e, tau):
    lp = fidelity_log_probs(e, tau)
    assert np.all(lp <= 0)
    assert abs(np.exp(lp).sum() - 1) < 1e-9


@pytest.mark.parametrize("e, tau", [([0.1, np.nan], 1.0), ([0.1, 0.2], 0.0), ([0.1, 0.2], -1.0)])
def test_fidelity_errors(e, tau):
    with pytest.raises(ValueError):
        fidelity_log_probs(e, tau)


# --- rewards and advantages ---------------------------------------------------------------

def test_reward_examples():
    a = DiagnosticReport(severity=(60, 1, 1, 40))
    assert diagnostic_reward(a, a) == 0
    assert diagnostic_reward(a, DiagnosticReport(severity=(20, 1, 1, 10))) == 70
    assert diagnostic_reward(a, DiagnosticReport(severity=(70, 5, 5, 50))) < 0


def test_advantage_examples():
    np.testing.assert_allclose(advantages([10, 20, 30]), [-1.2247, 0, 1.2247], atol=1e-4)
    np.testing.assert_array_equal(advantages([5, 5, 5]), [0, 0, 0])
    np.testing.assert_allclose(advantages([0, 1]), [-1, 1], atol=1e-15)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=8))
def test_advantages_standardized_or_zero(r):
    a = advantages(r)
    if np.std(r) > 1e-12:
        assert abs(a.mean()) < 1e-9
        assert abs(a.std() - 1) < 1e-6
    else:
        assert not a.any()


# --- loss ------------------------------------------------------------------------------------

def group(adv, lp):
    n = len(adv)
    return GrpoGroup([], [], np.zeros(n), np.asarray(lp), np.zeros(n), np.asarray(adv), 1.0)


def test_zero_advantages_zero_loss():
    assert grpo_loss(group([0, 0], [math.log(0.75), math.log(0.25)])) == 0


def test_two_candidate_loss():
    loss = grpo_loss(group([-1, 1], [math.log(0.75), math.log(0.25)]))
    # -(1/2)(-ln 0.75 + ln 0.25) = ln(3) / 2
    assert loss == pytest.approx(math.log(3) / 2, abs=1e-15)


@given(st.permutations(range(5)))
def test_loss_permutation_invariant(perm):
    adv = np.array([-1.2, 0.3, 0.5, 1.1, -0.7])
    lp = np.log(np.array([0.1, 0.2, 0.3, 0.25, 0.15]))
    perm = list(perm)
    assert grpo_loss(group(adv[perm], lp[perm])) == pytest.approx(grpo_loss(group(adv, lp)), abs=1e-15)


# --- gradient ---------------------------------------------------------------------------

def fog_case(i=0):
    g = Rng(300, (i,)).generator()
    clean = 0.25 + 0.5 * random_scene(Rng(301, (i,)), 64, 64)
    A, t = g.uniform(0.7, 1.0, 3), float(g.uniform(0.4, 0.8))
    hazy = apply_fog(clean, FogParams.uniform(A, t, clean.shape[:2]))
    policy = RestorationPolicy(np.r_[t, A, 0.0, 0.0, 0.0], DEFAULT_EXPLORATION_STD)
    inputs = GroupInputs(hazy, clean, sample_noise(Rng(302, (i,)), 8), advantages(g.standard_normal(8)))
    return policy, inputs


def oracle_loss(mean, policy, inputs):
    vecs = np.clip(mean + policy.exploration_std * inputs.eps, LOWER, UPPER)
    e = np.array([np.mean((restore(inputs.degraded, RestorationParams.from_vector(v)) - inputs.clean) ** 2)
                  for v in vecs])
    return -np.mean(inputs.advantages * log_softmax(-e / max(e.mean(), 1e-6)))


def richardson_gradient(policy, inputs, h):
    def central(step):
        out = np.zeros(7)
        for k in range(7):
            d = np.zeros(7)
            d[k] = step
            out[k] = (oracle_loss(policy.mean + d, policy, inputs) - oracle_loss(policy.mean - d, policy, inputs)) / (2 * step)
        return out
    return (4 * central(h / 2) - central(h)) / 3


def test_gradient_matches_step_halved_oracle():
    policy, inputs = fog_case()
    g = loss_gradient(policy, inputs, fd_step=1e-4)
    o = richardson_gradient(policy, inputs, 1e-4)
    rel = np.abs(g - o) / np.maximum(np.abs(o), 1e-6 * np.abs(o).max())
    assert rel.max() <= 1e-3


def test_zero_advantages_zero_gradient():
    policy, inputs = fog_case()
    inputs.advantages = np.zeros(8)
    np.testing.assert_array_equal(loss_gradient(policy, inputs), np.zeros(7))


def test_collapsed_policy_has_no_gradient():
    policy, inputs = fog_case()
    policy = RestorationPolicy(policy.mean, np.full(7, 1e-12))
    eps = sample_noise(Rng(5), 4)
    inputs.eps = np.vstack([eps, -eps])
    np.testing.assert_allclose(loss_gradient(policy, inputs), 0.0, atol=1e-6)


def test_fd_step_must_be_positive():
    policy, inputs = fog_case()
    with pytest.raises(ValueError):
        loss_gradient(policy, inputs, fd_step=0.0)


# --- EBM oracle -----------------------------------------------------------------------------

@given(st.lists(st.floats(0, 0.5), min_size=2, max_size=8), st.floats(0.01, 1.0))
@settings(max_examples=50)
def test_softmax_matches_gibbs(e, sigma):
    p = np.exp(fidelity_log_probs(e, 2 * sigma ** 2))
    np.testing.assert_allclose(p, ebm_oracle_check(e, sigma), rtol=0, atol=1e-12)


def test_gibbs_examples():
    s = 0.3
    np.testing.assert_allclose(ebm_oracle_check([0.0, 2 * s * s * math.log(3)], s), [0.75, 0.25], atol=1e-15)
    np.testing.assert_allclose(ebm_oracle_check([0.4] * 5, s), [0.2] * 5, atol=1e-15)


# --- training -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dataset():
    out = []
    for i in range(3):
        clean = random_scene(Rng(40, (i,)), 32, 32)
        hazy, _, _ = degrade(clean, sample_recipe(Rng(41, (i,)), FOG_ONLY), Rng(41, (i,)))
        out.append(Sample(hazy, clean))
    return out


def test_zero_learning_rate_freezes_policy(tiny_dataset):
    state = train(tiny_dataset, TrainConfig(group_size=4, steps=3, learning_rate=0.0, seed=1))
    np.testing.assert_array_equal(state.policy.mean, np.zeros(7))
    assert state.step == 3 == len(state.reward_history)


def test_training_is_deterministic(tiny_dataset):
    cfg = dict(group_size=4, steps=3, seed=2, learning_rate=1e-2)
    a = train(tiny_dataset, TrainConfig(**cfg))
    b = train(tiny_dataset, TrainConfig(**cfg))
    assert a.reward_history == b.reward_history
    assert [log.line() for log in a.logs] == [log.line() for log in b.logs]
    np.testing.assert_array_equal(a.policy.mean, b.policy.mean)


def test_resume_matches_uninterrupted_run(tiny_dataset, tmp_path):
    cfg = dict(group_size=4, seed=3, learning_rate=1e-2)
    full = train(tiny_dataset, TrainConfig(steps=4, **cfg))
    half = train(tiny_dataset, TrainConfig(steps=2, **cfg))
    write_checkpoint(tmp_path / "ck.txt", half)
    resumed = read_checkpoint(tmp_path / "ck.txt")
    resumed.config = TrainConfig(steps=4, **cfg)
    resumed = train(tiny_dataset, resumed.config, resumed)
    assert resumed.reward_history == full.reward_history
    np.testing.assert_array_equal(resumed.policy.mean, full.policy.mean)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train([], TrainConfig(steps=1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(group_size=1).validate()
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0).validate()


# --- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_round_trip():
    g = Rng(77).generator()
    for _ in range(50):
        s = random_state(g)
        assert state_fields(parse_checkpoint(checkpoint_text(s))) == state_fields(s)


def test_checkpoint_version_mismatch_named():
    text = checkpoint_text(random_state(Rng(1).generator())).replace("version = 1", "version = 3")
    with pytest.raises(CheckpointError, match="'3'.*expected 1"):
        parse_checkpoint(text)


def test_checkpoint_history_must_match_step():
    s = random_state(Rng(2).generator())
    s.reward_history.append(1.0)
    with pytest.raises(CheckpointError, match="reward_history"):
        parse_checkpoint(checkpoint_text(s))


def test_checkpoint_write_is_atomic(tmp_path):
    s = random_state(Rng(3).generator())
    write_checkpoint(tmp_path / "c.txt", s)
    assert [p.name for p in tmp_path.iterdir()] == ["c.txt"]
