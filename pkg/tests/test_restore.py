import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reason_restore.degrade import FogParams, apply_fog
from reason_restore.diagnose import DiagnosticReport
from reason_restore.imgcore import Rng, psnr
from reason_restore.restore import (LOWER, NEUTRAL, UPPER, RestorationParams, RestorationPolicy,
                                    candidate_vectors, init_policy, prior_params, restore, sample_candidates,
                                    sample_noise)
from reason_restore.scenes import random_scene

STD = np.array([0.05, 0.02, 0.02, 0.02, 0.15, 0.1, 0.1])


def fogged(seed=0):
    clean = random_scene(Rng(seed), 64, 64)
    return clean, apply_fog(clean, FogParams.uniform((1, 1, 1), 0.5, clean.shape[:2]))


def test_neutral_params_are_identity():
    img = random_scene(Rng(1), 32, 32)
    np.testing.assert_array_equal(restore(img, RestorationParams()), img)


def test_exact_fog_inversion():
    clean, hazy = fogged()
    exact = restore(hazy, RestorationParams(defog_t=0.5, defog_A=(1, 1, 1)))
    assert psnr(exact, clean) >= 40.0
    wrong = restore(hazy, RestorationParams(defog_t=0.9, defog_A=(1, 1, 1)))
    assert psnr(wrong, clean) < psnr(exact, clean)


@given(st.lists(st.floats(-5, 5), min_size=7, max_size=7))
@settings(max_examples=30, deadline=None)
def test_restore_projects_and_stays_in_range(v):
    img = random_scene(Rng(2), 32, 32)
    p = RestorationParams.from_vector(v)
    out = restore(img, p)
    assert out.min() >= 0.0 and out.max() <= 1.0
    np.testing.assert_array_equal(out, restore(img, p.projected()))
    pv = p.projected().to_vector()
    assert np.all(pv >= LOWER) and np.all(pv <= UPPER)


def test_params_vector_round_trip():
    p = RestorationParams(0.6, (0.8, 0.9, 1.0), 0.5, 0.25, 0.1)
    assert RestorationParams.from_vector(p.to_vector()) == p
    with pytest.raises(ValueError):
        RestorationParams.from_vector(np.zeros(6))


def test_clean_report_gives_neutral_prior():
    np.testing.assert_array_equal(init_policy(DiagnosticReport()).mean, NEUTRAL)


def test_fog_report_seeds_transmission():
    r = DiagnosticReport(severity=(50.5, 1, 1, 1), transmission_mean=0.5, atmospheric_light=(0.9, 0.8, 0.7))
    p = prior_params(r)
    assert p.defog_t == 0.5 and p.defog_A == (0.9, 0.8, 0.7)
    assert init_policy(r).mean[0] == 0.5


def test_absent_degradations_stay_neutral():
    r = DiagnosticReport(severity=(10, 1, 1, 1), transmission_mean=0.6, noise_sigma=0.04, blur_length=5)
    np.testing.assert_array_equal(prior_params(r).to_vector(), NEUTRAL)


def test_identical_reports_identical_policies():
    r = DiagnosticReport(severity=(60, 30, 25, 40), transmission_mean=0.4, blur_length=3,
                         rain_coverage=0.2, noise_sigma=0.02)
    np.testing.assert_array_equal(init_policy(r).mean, init_policy(r).mean)


def test_vanishing_exploration_collapses_candidates():
    mu = np.array([0.6, 0.9, 0.9, 0.9, 0.5, 0.3, 0.2])
    pol = RestorationPolicy(mu, np.full(7, 1e-300))
    cands = candidate_vectors(pol, sample_noise(Rng(1), 6))
    np.testing.assert_array_equal(cands, np.tile(mu, (6, 1)))


def test_candidates_reproducible():
    pol = RestorationPolicy(NEUTRAL * 0.5, STD)
    a = sample_candidates(pol, Rng(3), 4)
    b = sample_candidates(pol, Rng(3), 4)
    assert a == b and len(a) == 4


def test_unprojected_sample_mean():
    mu = np.array([0.6, 0.9, 0.9, 0.9, 0.5, 0.3, 0.2])
    n = 10_000
    raw = mu + STD * sample_noise(Rng(4), n)
    se = STD / np.sqrt(n)
    assert np.all(np.abs(raw.mean(axis=0) - mu) < 3 * se)


def test_group_needs_two():
    with pytest.raises(ValueError, match="at least 2"):
        sample_noise(Rng(1), 1)


def test_policy_rejects_zero_exploration():
    with pytest.raises(ValueError):
        RestorationPolicy(NEUTRAL, np.zeros(7))
