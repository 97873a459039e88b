import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, mpf

from dphfl.engine import make_schedule
from dphfl.privacy import (
    BudgetError,
    NoisePlan,
    PrivacyLedger,
    PrivacySpec,
    ReleaseRecord,
    calibrate,
    gaussian_mechanism_sigma,
    noise_std,
    record_release,
    sample_noise,
    sensitivities,
    validate_budget,
)
from dphfl.topology import build_topology


class TestSensitivities:
    def test_values(self):
        s = sensitivities(0.05, 20, 1.0, 5)
        assert s.device_local == pytest.approx(2.0)
        assert s.edge_local == pytest.approx(0.4)
        assert s.device_global == s.device_local and s.edge_global == s.edge_local

    def test_single_device_subnet(self):
        s = sensitivities(0.1, 3, 2.0, 1)
        assert s.edge_local == s.device_local == pytest.approx(1.2)


class TestNoiseStd:
    def test_independent_oracle(self):
        mp.dps = 40
        args = (1.7, 0.3, 0.25, 17, 1e-4, 0.9)
        expected = mpf("1.7") * mpf("0.3") * mpf("0.25") * mp.sqrt(17 * mp.log(1 / mpf("1e-4"))) / mpf("0.9")
        assert noise_std(*args) == pytest.approx(float(expected), rel=1e-13)

    def test_infinite_epsilon(self):
        assert noise_std(1.0, 0.1, 0.5, 10, 1e-5, math.inf) == 0.0

    @pytest.mark.parametrize("eps, L", [(0.0, 5), (-1.0, 5), (1.0, 0)])
    def test_errors(self, eps, L):
        with pytest.raises(BudgetError):
            noise_std(1.0, 0.1, 0.5, L, 1e-5, eps)

    @settings(max_examples=100, deadline=None)
    @given(
        c=st.floats(0.1, 10), q=st.floats(0.01, 1.0), d=st.floats(1e-3, 10),
        L=st.integers(1, 500), delta=st.floats(1e-9, 0.5), eps=st.floats(0.01, 20),
        k=st.floats(0.1, 10),
    )
    def test_homogeneity(self, c, q, d, L, delta, eps, k):
        base = noise_std(c, q, d, L, delta, eps)
        assert noise_std(c, q, k * d, L, delta, eps) == pytest.approx(k * base, rel=1e-12)
        assert noise_std(c, min(1.0, q * 0.5), d, L, delta, eps) == pytest.approx(
            min(1.0, q * 0.5) / q * base, rel=1e-12
        )
        assert noise_std(c, q, d, L, delta, k * eps) == pytest.approx(base / k, rel=1e-12)
        assert noise_std(c, q, d, 4 * L, delta, eps) == pytest.approx(2 * base, rel=1e-12)

    def test_reference_helper(self):
        assert gaussian_mechanism_sigma(1.0, 1.0, 1e-5) == pytest.approx(math.sqrt(2 * math.log(1.25e5)))


class TestSpecAndBudget:
    def test_validation(self):
        with pytest.raises(BudgetError):
            PrivacySpec(0.0, 1e-5, 0.1, 1.0)
        with pytest.raises(BudgetError):
            PrivacySpec(1.0, 1.0, 0.1, 1.0)
        with pytest.raises(BudgetError):
            PrivacySpec(1.0, 1e-5, 0.0, 1.0)
        with pytest.raises(BudgetError, match="finite grad_bound"):
            PrivacySpec(1.0, 1e-5, 0.1, math.inf)
        assert not PrivacySpec.disabled().enabled

    def test_budget_boundary(self):
        spec = PrivacySpec(2.0, 1e-5, 0.1, 1.0)
        validate_budget(spec, 21)
        with pytest.raises(BudgetError, match="epsilon >= c1\\*q\\*L"):
            validate_budget(spec, 20)
        with pytest.raises(BudgetError, match="no releases"):
            validate_budget(spec, 0)


@pytest.fixture
def mixed_topology():
    return build_topology(3, [1, 2, 5], [True, False, True])


class TestCalibrate:
    def test_scales(self, mixed_topology):
        schedule = make_schedule(40, 20, 5)
        spec = PrivacySpec(1.0, 1e-5, 0.1, 1.0)
        plan = calibrate(spec, mixed_topology, schedule, [0.01] * 40)
        assert plan.local_counts.tolist() == [120] * 3
        assert plan.global_count == 40
        for c, s in enumerate(mixed_topology.sizes):
            sens = sensitivities(0.01, 20, 1.0, int(s))
            assert plan.sigma_edge_local[c] == pytest.approx(noise_std(1, 0.1, sens.edge_local, 120, 1e-5, 1.0))
            assert plan.sigma_edge_global[c] == pytest.approx(noise_std(1, 0.1, sens.edge_global, 40, 1e-5, 1.0))
            assert plan.sigma_device_local[c] == pytest.approx(s * plan.sigma_edge_local[c])
            assert plan.sigma_device_global[c] == pytest.approx(s * plan.sigma_edge_global[c])

    def test_constants_split_by_tier(self, mixed_topology):
        schedule = make_schedule(40, 20, 5)
        base = calibrate(PrivacySpec(1.0, 1e-5, 0.1, 1.0), mixed_topology, schedule, [0.01] * 40)
        scaled = calibrate(PrivacySpec(1.0, 1e-5, 0.1, 1.0, c2=2.0, v2=3.0), mixed_topology, schedule, [0.01] * 40)
        np.testing.assert_allclose(scaled.sigma_edge_local, 2 * base.sigma_edge_local)
        np.testing.assert_allclose(scaled.sigma_device_global, 3 * base.sigma_device_global)

    def test_max_over_intervals(self, mixed_topology):
        schedule = make_schedule(20, 10, 5)
        etas = [0.05 / math.sqrt(k + 1) for k in range(20)]
        plan = calibrate(PrivacySpec(1.0, 1e-5, 0.5, 1.0), mixed_topology, schedule, etas)
        first = calibrate(PrivacySpec(1.0, 1e-5, 0.5, 1.0), mixed_topology, schedule, [0.05] * 20)
        np.testing.assert_allclose(plan.sigma_edge_global, first.sigma_edge_global)

    def test_dp_off_is_zero(self, mixed_topology):
        plan = calibrate(PrivacySpec.disabled(0.1, 1.0), mixed_topology, make_schedule(5, 4, 2), [0.1] * 5)
        for arr in (plan.sigma_edge_local, plan.sigma_device_local, plan.sigma_edge_global, plan.sigma_device_global):
            assert not arr.any()
        assert plan.local_counts.tolist() == [5] * 3

    def test_no_local_tier(self, mixed_topology):
        plan = calibrate(PrivacySpec(1.0, 1e-5, 0.5, 1.0), mixed_topology, make_schedule(5, 4, 4), [0.1] * 5)
        assert plan.local_counts.tolist() == [0] * 3
        assert not plan.sigma_edge_local.any()
        assert plan.sigma_edge_global.all()

    def test_budget_violation(self, mixed_topology):
        with pytest.raises(BudgetError):
            calibrate(PrivacySpec(1.0, 1e-5, 0.1, 1.0), mixed_topology, make_schedule(10, 20, 5), [0.01] * 10)

    def test_plan_serialises(self, mixed_topology):
        plan = calibrate(PrivacySpec(1.0, 1e-5, 0.1, 1.0), mixed_topology, make_schedule(40, 20, 5), [0.01] * 40)
        d = plan.to_dict()
        assert d["global_count"] == 40 and len(d["sigma_edge_local"]) == 3


class TestSampleNoise:
    def test_zero_sigma(self):
        rng = np.random.default_rng(0)
        assert not sample_noise(0.0, 5, rng).any()
        # zero-noise draws do not consume the stream
        assert rng.random() == np.random.default_rng(0).random()

    def test_deterministic_and_scaled(self):
        a = sample_noise(2.0, 100_000, 3)
        assert np.array_equal(a, sample_noise(2.0, 100_000, 3))
        assert a.std() == pytest.approx(2.0, rel=0.01)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            sample_noise(-1.0, 3, 0)


class TestLedger:
    def _ledger(self, local=3, glob=2):
        plan = NoisePlan(*(np.zeros(1) for _ in range(4)), np.array([local]), glob)
        return PrivacyLedger.for_plan(plan)

    def test_first_release(self):
        ledger = record_release(self._ledger(), ReleaseRecord(5, "edge", "local", 0, 0.1, 0.2))
        assert ledger.event_count(0, "local") == 1

    def test_over_budget(self):
        ledger = self._ledger(local=3)
        for t in (5, 10, 15):
            ledger.record(ReleaseRecord(t, "edge", "local", 0, 0.1, 0.2))
        with pytest.raises(BudgetError, match="over-budget"):
            ledger.record(ReleaseRecord(25, "edge", "local", 0, 0.1, 0.2))

    def test_devices_counted_per_entity(self):
        ledger = self._ledger(local=1)
        for j in range(4):
            ledger.record(ReleaseRecord(5, "device", "local", 0, 0.1, 0.2, device=j))
        assert ledger.event_count(0, "local") == 1
        with pytest.raises(BudgetError):
            ledger.record(ReleaseRecord(10, "device", "local", 0, 0.1, 0.2, device=2))

    def test_unplanned_event(self):
        with pytest.raises(BudgetError):
            self._ledger().record(ReleaseRecord(1, "edge", "local", 7, 0.1, 0.2))

    def test_counts_and_dict(self):
        ledger = self._ledger()
        ledger.record(ReleaseRecord(20, "edge", "global", 0, 0.1, 0.2))
        assert ledger.counts() == {(0, "local"): 0, (0, "global"): 1}
        assert ledger.to_dict()["records"][0]["t"] == 20
