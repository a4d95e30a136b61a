import math

import numpy as np
import pytest

from ecgfed.dpcore import (ALPHA_GRID, DpConfig, PrivacyLedger, add_central_noise, calibrate_sigma,
                           compose_and_convert, epsilon_for, rdp_of_gaussian)

# independent mpmath minimizations, tests/oracles/precompute.py
ORACLE_R100 = 218.86432075869026
ORACLE_R30 = 85.471014747974438


def closed_form(sigma, rounds, delta):
    c, log_inv = rounds / (2 * sigma * sigma), math.log(1 / delta)
    return c + 2 * math.sqrt(c * log_inv)


class TestAccountant:
    def test_single_gaussian_rdp(self):
        assert rdp_of_gaussian(2.0, 3.0) == 3 / 8
        with pytest.raises(ValueError):
            rdp_of_gaussian(1.0, 1.0)

    def test_oracle_points(self):
        assert epsilon_for(0.6, 100, 1e-5) == pytest.approx(ORACLE_R100, rel=1e-12)
        assert epsilon_for(0.6, 30, 1e-5) == pytest.approx(ORACLE_R30, rel=1e-12)

    def test_unit_sigma_single_round(self):
        eps, alpha = epsilon_for(1.0, 1, math.exp(-10), return_alpha=True)
        assert eps == pytest.approx(0.5 + 2 * math.sqrt(5), rel=1e-12)
        assert alpha == pytest.approx(1 + math.sqrt(20), rel=1e-6)

    @pytest.mark.parametrize("sigma,rounds,delta", [(0.5, 10, 1e-6), (1.1, 50, 1e-5), (3.0, 200, 1e-3)])
    def test_closed_form(self, sigma, rounds, delta):
        assert epsilon_for(sigma, rounds, delta) == pytest.approx(closed_form(sigma, rounds, delta), rel=1e-10)

    def test_grid_edge_is_a_bound(self):
        # optimum beyond the largest order: the grid answer may only be worse
        assert epsilon_for(50.0, 1, 1e-5) >= closed_form(50.0, 1, 1e-5)
        assert max(ALPHA_GRID) == 64

    def test_heterogeneous_rounds_add(self):
        led = PrivacyLedger()
        for s in (0.6, 1.0, 2.0):
            led.record(s, 1.0)
        assert led.rdp(2.0) == pytest.approx(2 * sum(1 / (2 * s * s) for s in (0.6, 1.0, 2.0)))

    def test_monotone_in_rounds(self):
        eps = [epsilon_for(1.0, r) for r in (1, 5, 20, 80)]
        assert eps == sorted(eps)

    def test_empty_and_bad_delta(self):
        with pytest.raises(ValueError):
            compose_and_convert(PrivacyLedger())
        led = PrivacyLedger()
        led.record(1.0, 1.0)
        with pytest.raises(ValueError):
            compose_and_convert(led, delta=1.0)

    def test_manifest_dict(self):
        led = PrivacyLedger()
        for _ in range(30):
            led.record(0.6, 1.0)
        d = led.to_dict(1e-5)
        assert d["rounds_applied"] == 30 and d["epsilon"] == pytest.approx(ORACLE_R30, rel=1e-12)
        assert "epsilon" not in PrivacyLedger().to_dict()


class TestCalibrate:
    @pytest.mark.parametrize("target,rounds", [(1.0, 1), (8.0, 100), (218.0, 100)])
    def test_round_trip(self, target, rounds):
        sigma = calibrate_sigma(target, 1e-5, rounds)
        assert epsilon_for(sigma, rounds, 1e-5) == pytest.approx(target, rel=1e-6)

    def test_unreachable(self):
        with pytest.raises(ValueError):
            calibrate_sigma(1e-6, 1e-5, 10)
        with pytest.raises(ValueError):
            calibrate_sigma(-1.0, 1e-5, 10)


class TestNoise:
    def test_scale_and_ledger(self):
        led = PrivacyLedger()
        cfg = DpConfig(sigma=0.6, C=0.5)
        out = add_central_noise(np.zeros(200_000), cfg, seed=3, ledger=led, round_index=2)
        assert out.std() == pytest.approx(0.3, rel=0.01) and abs(out.mean()) < 0.003
        assert led.sigmas == [0.6] and led.clips == [0.5]

    def test_seeded(self):
        cfg = DpConfig()
        a = add_central_noise(np.ones(5), cfg, 1, round_index=0)
        assert np.array_equal(a, add_central_noise(np.ones(5), cfg, 1, round_index=0))
        assert not np.array_equal(a, add_central_noise(np.ones(5), cfg, 1, round_index=1))

    def test_disabled(self):
        with pytest.raises(RuntimeError):
            add_central_noise(np.zeros(2), DpConfig(enabled=False), 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DpConfig(sigma=0.0)
        with pytest.raises(ValueError):
            DpConfig(delta=0.0)
        DpConfig(sigma=0.0, enabled=False)
