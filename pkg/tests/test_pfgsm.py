import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidattack.exceptions import ConfigError, SelectionError
from reidattack.pfgsm import (PFGSM, PfgsmConfig, attack_query_set_pfgsm, candidate_classes,
                              pfgsm_attack, select_target_class)


class ConstantGradientModel:
    """Stub victim: fixed probabilities, gradient of all ones, never reaches the target."""

    image_shape_ = (16, 8)
    classes_ = np.arange(3)

    def predict_proba(self, X):
        return np.tile([0.5, 0.3, 0.2], (len(X), 1))

    def decision_function(self, X):
        return np.log(self.predict_proba(X))

    def input_gradient(self, X, loss):
        return np.ones_like(X)


@pytest.mark.parametrize("kwargs", [dict(epsilon=0), dict(epsilon=0.3), dict(sigma=1.0),
                                    dict(sigma=-0.1), dict(max_iterations=0)])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        PfgsmConfig(**kwargs)


def test_worked_selection_fixtures(rng):
    sel = select_target_class(np.array([0.5, 0.3, 0.2]), 0.7, rng)
    assert sel.candidate_set == (2,) and sel.target_class == 2
    assert candidate_classes(np.full(4, 0.25), 0.5)[0] == (3,)
    assert set(candidate_classes(np.array([0.1, 0.6, 0.3]), 0.0)[0]) == {0, 2}


def test_selection_ties_keep_class_order():
    cands, _, order = candidate_classes(np.full(4, 0.25), 0.2)
    assert list(order) == [0, 1, 2, 3]
    assert cands == (1, 2, 3)


def test_selection_error_names_sigma(rng):
    with pytest.raises(SelectionError, match="sigma=0.95"):
        select_target_class(np.array([0.9, 0.1]), 0.95, rng)


def test_bad_probability_vector(rng):
    with pytest.raises(ConfigError):
        select_target_class(np.array([0.5, 0.6]), 0.1, rng)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 0.95))
@settings(max_examples=100, deadline=None)
def test_target_never_in_prefix(seed, sigma):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(int(rng.integers(2, 12)), 0.5))
    try:
        sel = select_target_class(p, sigma, rng)
    except SelectionError:
        return
    rank = int(np.flatnonzero(sel.order == sel.target_class)[0])
    assert sel.sorted_probs[:rank].sum() > sigma
    assert sel.target_class != sel.order[0]


def test_single_step_trivial_example():
    x = np.full((1, 3, 16, 8), 0.5)
    adv, traces = pfgsm_attack(ConstantGradientModel(), x,
                               PfgsmConfig(epsilon=0.1, sigma=0.0, max_iterations=1))
    np.testing.assert_allclose(adv, 0.4)
    assert traces[0].iterations_used == 1 and not traces[0].success


def test_budget_law_and_clamp_with_stub():
    x = np.zeros((2, 3, 16, 8)) + np.array([0.05, 0.9])[:, None, None, None]
    cfg = PfgsmConfig(epsilon=0.02, sigma=0.0, max_iterations=10)
    adv, traces = pfgsm_attack(ConstantGradientModel(), x, cfg)
    assert adv.min() >= 0.0
    assert np.abs(adv - x).max() <= 10 * 0.02 + 1e-12
    assert adv[0].max() == 0.0
    assert all(t.iterations_used == 10 for t in traces)


def test_attack_on_victim(victim, bundle):
    X = bundle.images("train")[:16]
    cfg = PfgsmConfig(seed=7)
    adv, traces = pfgsm_attack(victim, X, cfg)
    assert adv.min() >= 0 and adv.max() <= 1
    for t in traces:
        assert t.linf_budget_used <= t.iterations_used * cfg.epsilon + 1e-12
    assert np.mean([t.success for t in traces]) >= 0.9
    # the target is never the clean prediction
    clean = victim.decision_function(X).argmax(1)
    assert all(t.target_class != c for t, c in zip(traces, clean))


def test_query_set_artifact_and_worker_invariance(victim, bundle):
    cfg = PfgsmConfig(seed=7, max_iterations=5)
    one = attack_query_set_pfgsm(victim, bundle, cfg, n_jobs=1)
    two = attack_query_set_pfgsm(victim, bundle, cfg, n_jobs=2)
    np.testing.assert_array_equal(one.perturbed, two.perturbed)
    assert len(one.perturbed) == len(bundle.query)
    assert one.traces == two.traces
    assert {"target_id", "ms_ssim", "linf", "l2", "success"} <= set(one.records()[0])
    assert one.meta["protected_class"] == "predicted train identity"


def test_artifact_save_load_roundtrip(victim, bundle, tmp_path):
    from reidattack.artifacts import AttackArtifact
    art = attack_query_set_pfgsm(victim, bundle, PfgsmConfig(seed=7, max_iterations=2))
    art.save(tmp_path / "a")
    back = AttackArtifact.load(tmp_path / "a")
    np.testing.assert_array_equal(back.perturbed, art.perturbed)
    np.testing.assert_array_equal(back.ms_ssim, art.ms_ssim)
    assert back.sample_ids == art.sample_ids
    assert len(list((tmp_path / "a" / "png").iterdir())) == len(art)


def test_keying_by_id_is_order_free(victim, bundle):
    X = bundle.images("query")[:6]
    keys = bundle.sample_ids("query")[:6]
    cfg = PfgsmConfig(seed=3, max_iterations=4)
    adv, _ = pfgsm_attack(victim, X, cfg, keys=keys)
    rev, _ = pfgsm_attack(victim, X[::-1], cfg, keys=keys[::-1])
    np.testing.assert_array_equal(adv, rev[::-1])


def test_estimator(victim, bundle):
    est = PFGSM(victim=victim, max_iterations=3, seed=1).fit()
    out = est.transform(bundle.images("query")[:4])
    assert out.shape == (4, 3, 64, 32)
    with pytest.raises(ConfigError):
        PFGSM().fit()
