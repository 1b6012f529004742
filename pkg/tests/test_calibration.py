import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ddtb.calibration import (CalibConfig, LayerStats, calibrate_model, collect_statistics, init_bounds,
                              initialize_quantizers, parse_stats_report, percentile, select_gated_layers,
                              stats_report)
from ddtb.errors import ParameterError
from ddtb.models import SRModel, build_model
from ddtb.quantizers import ActQuantizer, SymmetricQuantizer


def stats_from(acts, name="l"):
    return LayerStats.from_activations(name, np.asarray(acts, dtype=float))


class TestStats:
    def test_constant(self):
        s = stats_from(np.full((3, 2, 2, 2), 1.5))
        assert s.v_max == s.v_min == s.di == 0.0

    def test_hand_variance(self):
        acts = np.array([[1.0, -1.0, 0.0], [3.0, -1.0, 0.5]])
        s = stats_from(acts)
        assert (s.v_max, s.v_min, s.di) == (1.0, 0.0, 1.0)

    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=6), min_size=1, max_size=8))
    def test_di_matches_oracle(self, rows):
        width = min(len(r) for r in rows)
        acts = np.array([r[:width] for r in rows])
        s = stats_from(acts)
        vmax = oracles.population_variance([max(r) for r in acts.tolist()])
        vmin = oracles.population_variance([min(r) for r in acts.tolist()])
        assert s.di == pytest.approx(vmax + vmin, rel=1e-9, abs=1e-9)
        assert s.di == s.v_max + s.v_min

    def test_empty(self):
        with pytest.raises(ParameterError):
            stats_from(np.zeros((0, 3)))


class TestBounds:
    def test_one_to_hundred(self):
        s = stats_from(np.arange(1.0, 101.0).reshape(1, -1))
        lo, hi = init_bounds(s, 99)
        assert hi == pytest.approx(99.01) and lo == pytest.approx(1.99)

    def test_m100_is_min_max(self, rng):
        x = rng.normal(size=(4, 50))
        assert init_bounds(stats_from(x), 100) == (x.min(), x.max())

    def test_symmetric_sample(self, rng):
        x = rng.normal(size=200)
        lo, hi = init_bounds(stats_from(np.concatenate([x, -x]).reshape(1, -1)), 95)
        assert lo == pytest.approx(-hi)

    def test_degenerate_widened(self, caplog):
        lo, hi = init_bounds(stats_from(np.full((2, 5), 3.0)), 99)
        assert lo < 3.0 < hi
        assert "degenerate" in caplog.text

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300), st.floats(0, 100))
    def test_percentile_oracle(self, xs, p):
        assert percentile(xs, p) == pytest.approx(oracles.percentile(xs, p), rel=1e-12, abs=1e-9)


class TestSelection:
    def test_example(self):
        assert select_gated_layers({"a": 0.5, "b": 2.0, "c": 1.0, "d": 0.1}, 50) == ["b", "c"]

    def test_extremes(self):
        di = {"a": 1.0, "b": 2.0}
        assert select_gated_layers(di, 0) == []
        assert select_gated_layers(di, 100) == ["a", "b"]

    def test_ties_prefer_shallow(self):
        assert select_gated_layers({"a": 1.0, "b": 1.0, "c": 1.0}, 34) == ["a", "b"]

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=30), st.floats(0, 100))
    def test_matches_sort_oracle(self, di, p):
        names = [f"l{i}" for i in range(len(di))]
        got = select_gated_layers(dict(zip(names, map(float, di))), p)
        assert got == [names[i] for i in oracles.top_p(di, p)]

    def test_bad_p(self):
        with pytest.raises(ParameterError):
            select_gated_layers({"a": 1.0}, 120)

    def test_config_ranges(self):
        for kw in ({"M": 50}, {"M": 101}, {"P": -1}, {"K": -1}):
            with pytest.raises(ParameterError):
                CalibConfig(**kw)


@pytest.fixture
def toy_model():
    return SRModel(build_model("edsr", 2, "toy", bits=2, blocks=2), np.random.default_rng(0))


def test_collect_covers_sites_and_relu_nonneg(toy_model, rng):
    stats = collect_statistics(toy_model, rng.uniform(0, 255, size=(3, 3, 8, 8)))
    assert list(stats) == [s.name for s in toy_model.sites()]
    for name, s in stats.items():
        if name.endswith("conv2"):
            assert s.sample_min.min() >= 0
        assert s.sample_max.shape == (3,)


def test_calibration_leaves_weights(toy_model, rng):
    before = {k: p.data.copy() for k, p in toy_model.params.items()}
    calibrate_model(toy_model, rng.uniform(0, 255, size=(2, 3, 8, 8)))
    assert all(np.array_equal(before[k], p.data) for k, p in toy_model.params.items())


def test_initialize_methods(toy_model, rng):
    stats = collect_statistics(toy_model, rng.uniform(0, 255, size=(4, 3, 8, 8)))
    gated = initialize_quantizers(toy_model, stats, "ddtb", M=99, P=50)
    assert len(gated) == 2 and set(gated) == set(toy_model.gates)
    assert all(isinstance(q, ActQuantizer) for q in toy_model.act_quant.values())
    assert all(toy_model.act_quant[n].gated for n in gated)
    initialize_quantizers(toy_model, stats, "pams")
    assert not toy_model.gates
    assert all(isinstance(q, SymmetricQuantizer) for q in toy_model.act_quant.values())
    with pytest.raises(ParameterError):
        initialize_quantizers(toy_model, stats, "lsq")


def test_report_roundtrip(toy_model, rng):
    stats = collect_statistics(toy_model, rng.uniform(0, 255, size=(2, 3, 8, 8)))
    parsed = parse_stats_report(stats_report(stats))
    assert list(parsed) == list(stats)
    for k, v in parsed.items():
        assert v == pytest.approx(stats[k].di, rel=1e-5, abs=1e-9)
