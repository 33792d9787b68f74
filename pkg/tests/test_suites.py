import json

import numpy as np

from omac import suites
from omac.cvf import CvfModel
from omac.suites import (SUITES, SuiteResult, expectile_suite, gradient_suite, structure_suite,
                         theorem1_config, theorem1_suite)


def test_gradient_suite_small_passes():
    res = gradient_suite(n_inits=4)
    assert res.passed, res.summary()
    assert len(res.checks) == 12
    json.dumps(res.to_dict())


def test_gradient_suite_catches_a_wrong_backward(monkeypatch):
    real = CvfModel.qtot_backward

    def skewed(self, cache, dq):
        grads = real(self, cache, dq)
        return {k: 1.01 * g for k, g in grads.items()}

    monkeypatch.setattr(CvfModel, "qtot_backward", skewed)
    res = gradient_suite(n_inits=2)
    assert not res.passed
    assert all(c.name.startswith("L_Q") for c in res.failures)


def test_structure_suite_small():
    res = structure_suite(60)
    assert res.passed, res.summary()
    assert res.extra["igm_checked"] > 0


def test_structure_trial_detects_broken_dominance(monkeypatch):
    # flip the sign of the advantage weights: negative wq breaks Q_tot <= V_tot
    real = CvfModel.qtot_forward

    def signed(self, obs, act, local_values, use_target=False):
        qtot, cache = real(self, obs, act, local_values, use_target)
        adv = cache["qsel"] - cache["lv"]
        return qtot - 2.0 * (np.abs(cache["zq"]) * adv).sum(axis=1), cache

    monkeypatch.setattr(CvfModel, "qtot_forward", signed)
    checks = [c for k in range(20) for c in suites.structure_trial(k, 2, 3)]
    assert any(not c.passed and c.name.startswith("Q_tot<=V_tot") for c in checks)


def test_expectile_suite():
    res = expectile_suite()
    assert res.passed, res.summary()
    assert len(res.checks) == 9 + 100 + 51


def test_theorem1_suite_shape():
    res = theorem1_suite(n_seeds=1, episodes=200, required=1,
                         config=theorem1_config(value_iters=100))
    assert [c.name for c in res.checks] == [
        "full: seeds within tolerance and monotone",
        "optimum-excluded: seeds within tolerance and monotone"]
    assert len(res.extra["seed_checks"]) == 2
    assert res.extra["full"]["v_star"] == {"0": 2.0}
    assert res.extra["optimum-excluded"]["v_star"] == {"0": 1.0}


def test_registry_and_summary():
    assert set(SUITES) == {"gradients", "structure", "expectile", "theorem1"}
    empty = SuiteResult("x")
    assert empty.passed and empty.summary().startswith("[PASS] x: 0/0")
