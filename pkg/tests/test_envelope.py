import math
import random

import pytest

from buswatch.envelope import (
    Envelope,
    EnvelopeDim,
    RiskAccumulator,
    RiskModel,
    instantaneous_risk,
    learn_surface,
    load_envelope_config,
)
from buswatch.errors import DegenerateDim, InsufficientData


def dim(name="speed", n=(0.0, 1.0), fos=(0.0, 1.5), oe=(0.0, 3.0), unit="m/s"):
    return EnvelopeDim(name=name, unit=unit, n_lo=n[0], n_hi=n[1],
                       fos_lo=fos[0], fos_hi=fos[1], oe_lo=oe[0], oe_hi=oe[1])


def two_dim_envelope():
    return Envelope([
        dim("speed", n=(0.0, 1.0), fos=(0.0, 1.5), oe=(0.0, 3.0)),
        dim("payload", n=(0.0, 5.0), fos=(0.0, 7.0), oe=(0.0, 15.0), unit="kg"),
    ])


class TestNesting:
    def test_valid_envelope_builds(self):
        two_dim_envelope()

    def test_nesting_violation_rejected(self):
        with pytest.raises(DegenerateDim):
            Envelope([dim(n=(0.0, 2.0), fos=(0.0, 1.5), oe=(0.0, 3.0))])

    def test_duplicate_names_rejected(self):
        with pytest.raises(DegenerateDim):
            Envelope([dim("a"), dim("a")])


class TestInstantaneousRisk:
    def test_inside_normal_bounds_is_zero(self):
        env = two_dim_envelope()
        r = instantaneous_risk((0.5, 2.0), env, RiskModel())
        assert r.risk == 0.0

    def test_on_safety_boundary_is_zero(self):
        env = two_dim_envelope()
        r = instantaneous_risk((1.5, 7.0), env, RiskModel())
        assert r.risk == 0.0

    def test_worked_example(self):
        # speed 2.25: exceedance (2.25-1.5)/(3.0-1.5) = 0.5; p=2, max -> 0.25
        env = two_dim_envelope()
        r = instantaneous_risk((2.25, 7.0), env, RiskModel(combine="max", p=2.0))
        assert r.exceedances["speed"] == pytest.approx(0.5)
        assert r.risk == pytest.approx(0.25)
        assert r.contributing_dims() == ["speed"]

    def test_beyond_envelope_clamps_and_flags(self):
        env = two_dim_envelope()
        r = instantaneous_risk((5.0, 2.0), env, RiskModel(combine="max", p=2.0))
        assert r.exceedances["speed"] == 1.0
        assert r.beyond_envelope == ("speed",)

    def test_degenerate_dim_is_unbounded_risk(self):
        env = Envelope([dim(fos=(0.0, 3.0), oe=(0.0, 3.0), n=(0.0, 1.0))])
        r = instantaneous_risk((3.5,), env, RiskModel())
        assert math.isinf(r.risk)

    def test_dimension_mismatch(self):
        with pytest.raises(DegenerateDim):
            instantaneous_risk((1.0,), two_dim_envelope(), RiskModel())

    def test_zero_inside_fos_randomized(self):
        rng = random.Random(12)
        for _ in range(200):
            bounds = sorted(rng.uniform(-100, 100) for _ in range(6))
            d = EnvelopeDim("x", "", n_lo=bounds[2], n_hi=bounds[3],
                            fos_lo=bounds[1], fos_hi=bounds[4],
                            oe_lo=bounds[0], oe_hi=bounds[5])
            env = Envelope([d])
            v = rng.uniform(bounds[1], bounds[4])
            assert instantaneous_risk((v,), env, RiskModel()).risk == 0.0

    def test_monotone_in_exceedance(self):
        env = two_dim_envelope()
        model = RiskModel(combine="max", p=2.0)
        risks = [instantaneous_risk((v, 2.0), env, model).risk
                 for v in (1.5, 1.8, 2.1, 2.4, 2.7, 3.0, 4.0)]
        assert risks == sorted(risks)


class TestAccumulator:
    def test_zero_risk_never_fires(self):
        env = two_dim_envelope()
        acc = RiskAccumulator(env, RiskModel(cutoff=0.5))
        for k in range(1000):
            assert acc.update((0.5, 1.0), dt_ms=10, t_ms=k * 10) is None
        assert acc.level == 0.0

    def test_lambda_zero_integral_fires_at_closed_form_time(self):
        # constant risk r with no leak: level = r * t, fires at cutoff/r
        env = Envelope([dim()])
        model = RiskModel(combine="max", p=1.0, leak_per_s=0.0, cutoff=2.0,
                          count_m=10**9)
        acc = RiskAccumulator(env, model)
        phi = (2.25,)  # exceedance 0.5, p=1 -> risk 0.5/s; expect fire at 4.0 s
        decision = None
        t = 0
        while decision is None:
            t += 10
            decision = acc.update(phi, dt_ms=10, t_ms=t)
        assert abs(t - 4000) <= 10
        assert decision.triggering_rule == "integral"
        assert decision.contributing_dims == {"speed": pytest.approx(0.5)}

    def test_brief_excursion_tolerated_sustained_fires(self):
        env = Envelope([dim()])
        model = RiskModel(combine="max", p=2.0, leak_per_s=0.1, cutoff=0.2,
                          count_m=10**9)
        acc = RiskAccumulator(env, model)
        # one tick at risk 0.25 never fires
        assert acc.update((2.25,), dt_ms=10, t_ms=10) is None
        for k in range(200):
            assert acc.update((1.0,), dt_ms=10, t_ms=20 + k * 10) is None
        # held for 100 ticks it must fire
        acc2 = RiskAccumulator(env, model)
        fired = None
        for k in range(100):
            fired = fired or acc2.update((2.25,), dt_ms=10, t_ms=(k + 1) * 10)
        assert fired is not None

    def test_count_rule(self):
        env = Envelope([dim()])
        model = RiskModel(cutoff=10**9, count_m=3, count_window_ms=5000)
        acc = RiskAccumulator(env, model)
        t = 0
        decision = None
        for _ in range(3):
            t += 500
            d = acc.update((2.0,), dt_ms=500, t_ms=t)  # enter excursion
            decision = decision or d
            t += 500
            d = acc.update((0.5,), dt_ms=500, t_ms=t)  # back inside
            decision = decision or d
        assert decision is not None
        assert decision.triggering_rule == "count"
        assert decision.excursion_count == 3

    def test_latch_and_reset(self):
        env = Envelope([dim()])
        model = RiskModel(combine="max", p=1.0, leak_per_s=0.0, cutoff=0.01,
                          count_m=10**9)
        acc = RiskAccumulator(env, model)
        d1 = None
        for k in range(10):
            d1 = d1 or acc.update((2.25,), dt_ms=10, t_ms=(k + 1) * 10)
        assert d1 is not None
        assert acc.update((2.25,), dt_ms=10, t_ms=200) is None  # latched
        acc.reset()
        assert acc.level == 0.0 and acc.armed

    def test_decision_lists_only_nonzero_dims(self):
        env = two_dim_envelope()
        model = RiskModel(combine="max", p=1.0, leak_per_s=0.0, cutoff=0.01,
                          count_m=10**9)
        acc = RiskAccumulator(env, model)
        decision = None
        for k in range(20):
            decision = decision or acc.update((2.25, 2.0), dt_ms=10, t_ms=(k + 1) * 10)
        assert decision is not None
        assert set(decision.contributing_dims) == {"speed"}

    def test_state_round_trip(self):
        env = Envelope([dim()])
        acc = RiskAccumulator(env, RiskModel(cutoff=100.0))
        for k in range(5):
            acc.update((2.0,), dt_ms=10, t_ms=(k + 1) * 10)
        clone = RiskAccumulator(env, RiskModel(cutoff=100.0))
        clone.load_state_dict(acc.state_dict())
        assert clone.level == acc.level
        assert list(clone.excursions) == list(acc.excursions)


class TestLearnSurface:
    def test_recovers_known_exponent(self):
        env = Envelope([dim()])
        rng = random.Random(4)
        samples = []
        for _ in range(60):
            v = rng.uniform(1.5, 3.0)
            e = (v - 1.5) / 1.5
            samples.append(((v,), e ** 2))  # true p=2, weight 1
        fit = learn_surface(env, samples, combine="max", p0=1.3)
        assert fit["fit"]
        assert abs(fit["p"] - 2.0) <= 0.1
        assert fit["residual"] < 1e-6

    def test_all_zero_outcomes_keep_defaults(self):
        env = Envelope([dim()])
        samples = [((2.0,), 0.0) for _ in range(20)]
        fit = learn_surface(env, samples)
        assert not fit["fit"]
        assert fit["p"] == 2.0 and fit["weights"] == (1.0,)

    def test_insufficient_samples(self):
        env = Envelope([dim()])
        with pytest.raises(InsufficientData):
            learn_surface(env, [((2.0,), 0.5)] * 5)


class TestConfig:
    def test_yaml_shape(self):
        doc = {
            "dims": [
                {"name": "speed", "unit": "m/s",
                 "source": {"topic": "/odom", "field": "speed", "abs": True},
                 "n": [0.0, 0.8], "fos": [0.0, 1.2], "oe": [0.0, 3.0]},
            ],
            "risk": {"combine": "max", "p": 2.0, "leak_per_s": 0.2,
                     "cutoff": 1.5, "count_trigger": {"m": 4, "window_ms": 8000}},
        }
        env, model, sources = load_envelope_config(doc)
        assert env.names() == ["speed"]
        assert model.cutoff == 1.5 and model.count_m == 4
        assert sources["speed"] == {"topic": "/odom", "field": "speed", "abs": True}
