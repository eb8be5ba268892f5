"""Tests for geoverity.services.mp."""

import asyncio

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geoverity.enums import JitterKind, RoundStatus
from geoverity.services.geometry import GeoPoint
from geoverity.services.mp import (
    MpError,
    PairwiseDelaySet,
    RawRelay,
    RelayObservation,
    RelayTamperedError,
    min_pairs,
    rtt_half_estimate,
    run_mp_round,
    solve_owd,
)
from geoverity.services.netsim import DelayModelParams, SimNode, SimTopology

delays = st.floats(min_value=0.0, max_value=500.0, allow_nan=False)


class FakeSession:
    """Relays every timestamp with delay owd[origin] + owd[observer]."""

    session_id = "fake"
    verifier_ids = ("A", "B", "C")

    def __init__(self, owd, *, drop=(), tamper=(), corrections=None):
        self.owd = owd
        self.drop = set(drop)
        self.tamper = set(tamper)
        self.corrections = corrections or {}
        self.turns = []

    def offset_corrections(self):
        return self.corrections

    async def run_turn(self, seq, origin, *, timeout_ms):
        self.turns.append(origin)
        relays = []
        for observer in self.verifier_ids:
            if observer == origin or (origin, observer) in self.drop:
                continue
            if (origin, observer) in self.tamper:
                raise RelayTamperedError(origin, observer)
            send = 1000.0 * seq
            relays.append(RawRelay(origin, observer, send, send + self.owd[origin] + self.owd[observer]))
        return relays

    async def pause(self, ms):
        return None


# ─── min_pairs / solve_owd ────────────────────────────────────────────────────


def test_min_pairs_direct_minima():
    d = PairwiseDelaySet(a_b=12, a_c=15, b_a=10, b_c=14, c_a=13, c_b=16)
    assert min_pairs(d) == (10, 13, 14)


def test_min_pairs_symmetric():
    assert min_pairs(PairwiseDelaySet(10, 10, 10, 10, 10, 10)) == (10, 10, 10)


def test_min_pairs_discards_inflated_reverse():
    d = PairwiseDelaySet(a_b=10, a_c=12, b_a=10, b_c=14, c_a=99, c_b=14)
    assert min_pairs(d) == (10, 12, 14)


def test_solve_owd_substitutes_back():
    est = solve_owd((10, 12, 14))
    assert (est.a, est.b, est.c, est.valid) == (4, 6, 8, True)


def test_solve_owd_symmetric():
    est = solve_owd((10, 10, 10))
    assert est.as_tuple() == (5, 5, 5)
    assert est.valid


def test_solve_owd_negative_component_is_invalid():
    est = solve_owd((2, 3, 9))
    assert est.a == -2
    assert not est.valid


def test_negative_delay_rejected():
    with pytest.raises(MpError):
        PairwiseDelaySet(-1, 0, 0, 0, 0, 0)


def test_observation_needs_distinct_endpoints():
    with pytest.raises(MpError):
        RelayObservation("A", "A", 0.0, 1.0, 0.0, 0)


def test_observation_correction_applies():
    obs = RelayObservation("A", "B", 100.0, 95.0, 7.0, 0)
    assert obs.corrected_delay == 2.0
    assert obs.valid
    assert not RelayObservation("A", "B", 100.0, 95.0, 0.0, 0).valid


@given(delays, delays, delays, delays, delays, delays, st.floats(min_value=0.0, max_value=100.0))
def test_min_pairs_ignores_inflating_the_larger_direction(ab, ac, ba, bc, ca, cb, extra):
    base = PairwiseDelaySet(ab, ac, ba, bc, ca, cb)
    if ab >= ba:
        inflated = PairwiseDelaySet(ab + extra, ac, ba, bc, ca, cb)
    else:
        inflated = PairwiseDelaySet(ab, ac, ba + extra, bc, ca, cb)
    assert min_pairs(inflated) == min_pairs(base)


@given(delays, delays, delays)
def test_solver_consistency(s_ab, s_ac, s_bc):
    est = solve_owd((s_ab, s_ac, s_bc))
    if est.valid:
        assert est.a + est.b == pytest.approx(s_ab, abs=1e-9)
        assert est.a + est.c == pytest.approx(s_ac, abs=1e-9)
        assert est.b + est.c == pytest.approx(s_bc, abs=1e-9)


def test_recovers_true_owds_on_noiseless_topologies():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        a, b, c = rng.uniform(0.1, 80.0, size=3)
        d = PairwiseDelaySet(a + b, a + c, b + a, b + c, c + a, c + b)
        est = solve_owd(min_pairs(d))
        assert est.valid
        assert est.as_tuple() == pytest.approx((a, b, c), abs=1e-9)


def test_mp_beats_half_rtt_on_asymmetric_routes():
    rng = np.random.default_rng(5)
    params = DelayModelParams(
        jitter=JitterKind.NONE,
        asymmetry_range=(1.0, 1.3),
        circuitous_range=(1.0, 1.5),
    )
    mp_err, rtt_err = [], []
    for seed in range(500):
        lats = rng.uniform(30.0, 45.0, size=4)
        lons = rng.uniform(-110.0, -80.0, size=4)
        names = ("A", "B", "C", "X")
        topo = SimTopology(
            (SimNode(n, GeoPoint(float(la), float(lo))) for n, la, lo in zip(names, lats, lons)),
            delay=params,
            seed=seed,
        )

        def relay(o, r):
            return topo.propagation_ms(o, "X") + topo.propagation_ms("X", r)

        d = PairwiseDelaySet(
            relay("A", "B"), relay("A", "C"), relay("B", "A"), relay("B", "C"), relay("C", "A"), relay("C", "B")
        )
        truth = [min(topo.propagation_ms(v, "X"), topo.propagation_ms("X", v)) for v in "ABC"]
        mp = solve_owd(min_pairs(d)).as_tuple()
        half = rtt_half_estimate(d).as_tuple()
        mp_err.extend(abs(e - t) for e, t in zip(mp, truth))
        rtt_err.extend(abs(e - t) for e, t in zip(half, truth))
    assert np.mean(mp_err) <= np.mean(rtt_err)


# ─── run_mp_round ─────────────────────────────────────────────────────────────


def test_round_all_owds_equal():
    session = FakeSession({"A": 5.0, "B": 5.0, "C": 5.0})
    mp_round = asyncio.run(run_mp_round(session, 0))
    assert mp_round.status is RoundStatus.COMPLETE
    assert mp_round.delays.as_tuple() == (10.0,) * 6
    assert mp_round.estimate.as_tuple() == (5.0, 5.0, 5.0)
    assert session.turns == ["A", "B", "C"]


def test_round_with_dropped_relay_is_incomplete():
    session = FakeSession({"A": 5.0, "B": 5.0, "C": 5.0}, drop={("B", "C")})
    mp_round = asyncio.run(run_mp_round(session, 1))
    assert mp_round.status is RoundStatus.INCOMPLETE
    assert mp_round.delays is None
    assert mp_round.estimate is None


def test_round_with_tampered_relay_aborts():
    session = FakeSession({"A": 5.0, "B": 5.0, "C": 5.0}, tamper={("B", "C")})
    mp_round = asyncio.run(run_mp_round(session, 2))
    assert mp_round.status is RoundStatus.TAMPERED
    assert mp_round.estimate is None
    # C never got its turn
    assert session.turns == ["A", "B"]


def test_round_applies_offset_corrections():
    corrections = {("A", "B"): 3.0}
    session = FakeSession({"A": 4.0, "B": 6.0, "C": 8.0}, corrections=corrections)
    mp_round = asyncio.run(run_mp_round(session, 0))
    assert mp_round.delays.a_b == 13.0
    assert mp_round.delays.b_a == 10.0
    assert mp_round.estimate.as_tuple() == pytest.approx((4.0, 6.0, 8.0))
