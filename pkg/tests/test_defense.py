import numpy as np
import pytest

from reidattack.defense import (DEFAULT_RATES, DropoutDefenseConfig, apply_inference_dropout,
                                defense_sweep, read_sweep_csv, write_sweep_csv)
from reidattack.exceptions import ConfigError
from reidattack.metrics import evaluate_reid


@pytest.mark.parametrize("kwargs", [dict(rate=1.0), dict(rate=-0.1), dict(passes=0)])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        DropoutDefenseConfig(**kwargs)


def test_rate_zero_is_bit_identical(tiny_victim, tiny_bundle):
    X = tiny_bundle.images("gallery")
    view = apply_inference_dropout(tiny_victim, DropoutDefenseConfig(rate=0.0, passes=3))
    np.testing.assert_array_equal(view.transform(X), tiny_victim.transform(X))
    np.testing.assert_array_equal(view.predict_proba(X), tiny_victim.predict_proba(X))


def test_dropout_is_deterministic_and_order_free(tiny_victim, tiny_bundle):
    X = tiny_bundle.images("gallery")
    view = apply_inference_dropout(tiny_victim, DropoutDefenseConfig(rate=0.5, seed=4))
    a = view.transform(X)
    np.testing.assert_array_equal(a, view.transform(X))
    np.testing.assert_array_equal(a[::-1], view.transform(X[::-1]))
    # masks do not depend on the batch; only float rounding of batched matmuls may
    np.testing.assert_allclose(a[:2], view.transform(X[:2]), atol=1e-12)
    assert not np.allclose(a, tiny_victim.transform(X))
    other = apply_inference_dropout(tiny_victim, DropoutDefenseConfig(rate=0.5, seed=5))
    assert not np.array_equal(a, other.transform(X))


def test_predict_matches_proba(tiny_victim, tiny_bundle):
    view = apply_inference_dropout(tiny_victim, DropoutDefenseConfig(rate=0.25))
    X = tiny_bundle.images("query")
    np.testing.assert_array_equal(view.predict(X),
                                  tiny_victim.classes_[view.predict_proba(X).argmax(1)])


# pilot on the default victim: 256-pass spread across seeds is 0.014-0.024 per class,
# consistent with a per-pass standard deviation near 0.2 at rate 0.5
MC_GATE = 0.03


def _mc_spread(victim, probe, passes, seeds=range(3)):
    means = [apply_inference_dropout(victim, DropoutDefenseConfig(rate=0.5, passes=passes,
                                                                  seed=s)).predict_proba(probe)[0]
             for s in seeds]
    return max(np.abs(a - b).max() for a in means for b in means)


def test_monte_carlo_average_converges(victim, bundle):
    probe = bundle.images("query")[:1]
    spread_256 = _mc_spread(victim, probe, 256)
    assert spread_256 <= MC_GATE
    # sixteen times the passes should cut the spread by about four
    assert spread_256 < _mc_spread(victim, probe, 16, seeds=range(10, 13))


def test_sweep_rate_zero_rows_and_grid(tiny_victim, tiny_bundle, tmp_path):
    rows = defense_sweep(tiny_victim, tiny_bundle, {"NoAttack": None}, rates=[0.1, 0.5])
    assert [r["rate"] for r in rows] == [0.0, 0.1, 0.5]
    clean = evaluate_reid(tiny_victim, tiny_bundle).metrics()
    assert {k: rows[0][k] for k in clean} == clean
    path = write_sweep_csv(rows, tmp_path / "s.csv")
    again = write_sweep_csv(defense_sweep(tiny_victim, tiny_bundle, {"NoAttack": None},
                                          rates=[0.1, 0.5]), tmp_path / "t.csv")
    assert path.read_bytes() == again.read_bytes()
    back = read_sweep_csv(path)
    assert [r["rate"] for r in back] == [0.0, 0.1, 0.5]


def test_sweep_requires_baseline(tiny_victim, tiny_bundle):
    with pytest.raises(ConfigError, match="NoAttack"):
        defense_sweep(tiny_victim, tiny_bundle, {"PFGSM": None})
    with pytest.raises(ConfigError, match="at least one"):
        defense_sweep(tiny_victim, tiny_bundle, {"NoAttack": None}, rates=[])


def test_default_rates_span_range():
    assert min(DEFAULT_RATES) == 0.025 and max(DEFAULT_RATES) == 0.75
