import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidattack.exceptions import ConfigError, ProtocolError
from reidattack.metrics import (DistanceMatrix, EvalProtocol, cmc_at_k, compute_distance_matrix,
                                evaluate_distances, evaluate_reid, mean_average_precision)

from oracles import brute_force_rank_metrics, random_metric_instance

NO_JUNK = EvalProtocol(junk_ids=frozenset())


def _dm(dist, qids, qcams, gids, gcams):
    return DistanceMatrix(np.asarray(dist, float)).with_labels(qids, qcams, gids, gcams)


def test_distance_matrix_matches_scipy(rng):
    from scipy.spatial.distance import cdist
    q, g = rng.normal(size=(5, 7)), rng.normal(size=(9, 7))
    np.testing.assert_allclose(compute_distance_matrix(q, g).values, cdist(q, g), atol=1e-12)


def test_distance_matrix_rejects_mismatch():
    with pytest.raises(ConfigError, match="mismatch"):
        compute_distance_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


def test_perfect_ranking_is_100():
    dm = _dm([[0.1, 0.9, 0.5]], [1], [1], [1, 2, 3], [2, 2, 2])
    assert mean_average_precision(dm, NO_JUNK) == 100.0
    assert cmc_at_k(dm, NO_JUNK, 1) == 100.0


def test_worked_average_precision():
    # hits at ranks 2 and 4: AP = (1/2 + 2/4) / 2 = 0.5
    dm = _dm([[0.1, 0.2, 0.3, 0.4]], [1], [1], [2, 1, 3, 1], [2, 2, 2, 2])
    assert mean_average_precision(dm, NO_JUNK) == pytest.approx(50.0)
    assert cmc_at_k(dm, NO_JUNK, 1) == 0.0
    assert cmc_at_k(dm, NO_JUNK, 2) == 100.0


def test_same_camera_same_id_excluded():
    # the closest item is the same person under the same camera and must be skipped
    dm = _dm([[0.0, 0.5, 0.9]], [1], [1], [1, 2, 1], [1, 2, 2])
    assert cmc_at_k(dm, NO_JUNK, 1) == 0.0
    assert cmc_at_k(dm, EvalProtocol(exclude_same_camera_same_id=False, junk_ids=()), 1) == 100.0


def test_junk_ignored():
    dm = _dm([[0.0, 0.5]], [1], [1], [-1, 1], [2, 2])
    assert cmc_at_k(dm, EvalProtocol(junk_ids={-1}), 1) == 100.0


def test_query_without_match_raises():
    dm = _dm([[0.1, 0.2]], [1], [1], [1, 2], [1, 2])
    with pytest.raises(ProtocolError, match="no valid"):
        mean_average_precision(dm, NO_JUNK)


def test_unlabelled_matrix_raises():
    with pytest.raises(ProtocolError):
        cmc_at_k(DistanceMatrix(np.zeros((1, 1))), NO_JUNK, 1)


def test_invalid_k():
    dm = _dm([[0.1]], [1], [1], [1], [2])
    with pytest.raises(ConfigError):
        cmc_at_k(dm, NO_JUNK, 0)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=60, deadline=None)
def test_metrics_match_oracle_property(seed):
    rng = np.random.default_rng(seed)
    dist, qids, qcams, gids, gcams = random_metric_instance(rng)
    junk = {int(gids[0])} if rng.random() < 0.3 else set()
    expected = brute_force_rank_metrics(dist, qids, qcams, gids, gcams, junk=junk)
    dm = _dm(dist, qids, qcams, gids, gcams)
    proto = EvalProtocol(junk_ids=junk)
    if expected is None:
        with pytest.raises(ProtocolError):
            evaluate_distances(dm, proto)
        return
    rep = evaluate_distances(dm, proto)
    assert rep.mAP == pytest.approx(expected[0], abs=1e-7)
    for k in (1, 5, 10):
        assert rep.cmc[k] == pytest.approx(expected[1][k], abs=1e-9)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_cmc_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    dm = _dm(*random_metric_instance(rng))
    values = [cmc_at_k(dm, NO_JUNK, k) for k in range(1, 12)]
    assert all(0 <= v <= 100 for v in values)
    assert values == sorted(values)
    assert 0 < mean_average_precision(dm, NO_JUNK) <= 100


def test_evaluate_reid_clean_victim(victim, bundle):
    rep = evaluate_reid(victim, bundle)
    assert rep.mAP > 90 and rep.cmc[1] > 90
    assert rep.row("synthetic", "NoAttack")[:2] == ["synthetic", "NoAttack"]
    assert len(rep.per_query_ap) == len(bundle.query)


def test_evaluate_reid_rejects_bad_override(victim, bundle):
    with pytest.raises(ConfigError):
        evaluate_reid(victim, bundle, query_override=np.zeros((2, 3, 64, 32)))
