"""Risk model tests: TTC/PET oracles, urgency normalization, fusion, DCZ."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saferes import risk as R
from saferes import world as W


def veh(x, v, y=0.0, theta=0.0, kind=W.Kind.AV):
    return W.ParticipantState(x=x, y=y, theta=theta, v=v, lane=W.lane_from_y(y), kind=kind)


def ped(x, y, theta=90.0, v=0.0):
    return W.ParticipantState(x=x, y=y, theta=theta, v=v, lane=W.lane_from_y(y), kind=W.Kind.PED)


def make_world(participants, scripts=None, scenario="LVEB", n_avs=1):
    spec = W.ScenarioSpec(scenario_id=scenario, seed=0, n_avs=n_avs, n_bvs=0, n_peds=0)
    return W.WorldState(spec, participants, scripts or [])


# ---------------------------------------------------------------------------
# TTC


def test_ttc_hand_case():
    # bumper gap 50 m closing at 10 m/s
    ego = veh(0.0, 20.0)
    lead = veh(54.8, 10.0, kind=W.Kind.BV)
    assert R.compute_ttc(ego, lead) == pytest.approx(5.0, abs=1e-12)


def test_ttc_not_closing():
    ego = veh(0.0, 10.0)
    lead = veh(40.0, 15.0, kind=W.Kind.BV)
    assert R.compute_ttc(ego, lead) == math.inf
    same = veh(40.0, 10.0, kind=W.Kind.BV)
    assert R.compute_ttc(ego, same) == math.inf


def test_ttc_overlap_is_zero():
    ego = veh(0.0, 10.0)
    tight = veh(4.0, 5.0, kind=W.Kind.BV)  # within one vehicle length
    assert R.compute_ttc(ego, tight) == 0.0


def test_ttc_symmetric_and_translation_invariant():
    a = veh(3.0, 18.0)
    b = veh(60.0, 6.0, kind=W.Kind.BV)
    t1 = R.compute_ttc(a, b)
    assert t1 == R.compute_ttc(b, a)
    shift = 512.0
    a2 = veh(3.0 + shift, 18.0)
    b2 = veh(60.0 + shift, 6.0, kind=W.Kind.BV)
    assert R.compute_ttc(a2, b2) == pytest.approx(t1, rel=1e-12)
    assert t1 >= 0.0


# ---------------------------------------------------------------------------
# PET


def test_pet_simultaneous_arrival():
    # vehicle ETA 20/10 = 2 s, pedestrian ETA 3/1.5 = 2 s
    v = veh(0.0, 10.0)
    p = ped(20.0, -3.0, theta=90.0, v=1.5)
    assert R.compute_pet(v, p) == pytest.approx(0.0, abs=1e-12)


def test_pet_eta_difference():
    v = veh(0.0, 10.0)  # ETA 2 s to x=20
    p = ped(20.0, -3.0, theta=90.0, v=0.6)  # ETA 5 s to the lane center
    assert R.compute_pet(v, p) == pytest.approx(3.0, abs=1e-12)


def test_pet_walking_away():
    v = veh(0.0, 10.0)
    p = ped(20.0, -3.0, theta=270.0, v=1.5)  # away from the road
    assert R.compute_pet(v, p) == math.inf


def test_pet_behind_vehicle():
    v = veh(30.0, 10.0)
    p = ped(20.0, -3.0, theta=90.0, v=1.5)
    assert R.compute_pet(v, p) == math.inf


def test_pet_standing_pedestrian():
    v = veh(0.0, 10.0)
    p = ped(20.0, -3.0, theta=90.0, v=0.0)
    assert R.compute_pet(v, p) == math.inf


def test_pet_translation_invariant():
    v = veh(0.0, 10.0)
    p = ped(20.0, -3.0, theta=90.0, v=0.6)
    base = R.compute_pet(v, p)
    v2 = veh(100.0, 10.0)
    p2 = ped(120.0, -3.0, theta=90.0, v=0.6)
    assert R.compute_pet(v2, p2) == pytest.approx(base, rel=1e-12)


# ---------------------------------------------------------------------------
# urgency normalization


def test_urgency_at_threshold():
    assert R.normalize_urgency(3.0, 3.0, 0.01) == 1.0


def test_urgency_double_threshold():
    assert R.normalize_urgency(6.0, 3.0, 0.01) == 0.5


def test_urgency_infinite():
    assert R.normalize_urgency(math.inf, 3.0, 0.01) == 0.01


def test_urgency_nonpositive_clamps_high():
    assert R.normalize_urgency(0.0, 3.0, 0.01) == 1.0
    assert R.normalize_urgency(-1.0, 3.0, 0.01) == 1.0


@given(value=st.floats(0.001, 1e6), tau=st.floats(0.5, 10.0))
@settings(max_examples=200, deadline=None)
def test_urgency_range(value, tau):
    out = R.normalize_urgency(value, tau, 0.01)
    assert 0.01 <= out <= 1.0


# ---------------------------------------------------------------------------
# fused risk


def test_risk_hand_case():
    """TTC at twice its threshold, no pedestrians, no events."""
    cfg = R.RiskConfig()
    # bumper gap 30 m closing at 5 m/s: TTC = 6 s = 2*tau_v2v
    ego = veh(0.0, 15.0)
    lead = veh(34.8, 10.0, kind=W.Kind.BV)
    world = make_world([ego, lead])
    report = R.assess(world, cfg)[0]
    assert report.ttc == pytest.approx(6.0, abs=1e-12)
    assert report.ttc_norm == pytest.approx(0.5, abs=1e-12)
    assert report.pet_norm == cfg.eps_norm
    assert report.risk == pytest.approx(0.4 * 0.5 + 0.3 * 0.01, abs=1e-12)
    assert report.risk == pytest.approx(0.203, abs=1e-12)


def test_risk_floor():
    cfg = R.RiskConfig()
    world = make_world([veh(0.0, 12.0)])
    report = R.assess(world, cfg)[0]
    assert report.risk == cfg.w0
    assert not report.in_dcz


def test_risk_upper_clamp():
    # weights deliberately sum past 1 so the clamp engages
    cfg = R.RiskConfig(lambda1=0.5, lambda2=0.4, lambda3=0.3, beta={W.EVENT_LEAD_BRAKE: 1.0})
    ego = veh(0.0, 15.0)
    lead = veh(5.5, 0.0, kind=W.Kind.BV)  # sub-meter bumper gap
    crossing = ped(2.0, -1.0, theta=90.0, v=1.5)
    world = make_world([ego, lead, crossing])
    script = W.Script(index=1, role=W.ROLE_LEAD, event_tag=W.EVENT_LEAD_BRAKE, active=True)
    world.scripts = [script]
    world.events_active = {W.EVENT_LEAD_BRAKE}
    report = R.assess(world, cfg)[0]
    assert report.ttc_norm == 1.0
    assert report.risk == 1.0
    assert report.in_dcz


def test_scene_risk_is_max():
    cfg = R.RiskConfig()
    ego0 = veh(0.0, 15.0)
    ego1 = veh(0.0, 12.0, y=3.5)
    lead = veh(20.0, 5.0, kind=W.Kind.BV)  # threatens ego0 only
    spec = W.ScenarioSpec(scenario_id="LVEB", seed=0, n_avs=2, n_bvs=0)
    world = W.WorldState(spec, [ego0, ego1, lead], [])
    per_av, scene = R.risk_of(world, cfg)
    assert scene == max(per_av)
    assert per_av[0] > per_av[1]


def test_lateral_gate_excludes_other_lane():
    cfg = R.RiskConfig()
    ego = veh(0.0, 15.0, y=0.0)
    other = veh(20.0, 5.0, y=3.5, kind=W.Kind.BV)
    world = make_world([ego, other])
    report = R.assess(world, cfg)[0]
    assert report.ttc == math.inf


def test_event_branch_requires_proximity():
    cfg = R.RiskConfig()
    ego = veh(0.0, 12.0)
    lead = veh(cfg.event_radius + 30.0, 12.0, kind=W.Kind.BV)
    world = make_world([ego, lead])
    world.scripts = [W.Script(index=1, role=W.ROLE_LEAD, event_tag=W.EVENT_LEAD_BRAKE, active=True)]
    world.events_active = {W.EVENT_LEAD_BRAKE}
    report = R.assess(world, cfg)[0]
    assert not report.events.get(W.EVENT_LEAD_BRAKE, False)
    assert not report.in_dcz
    # move the source inside the radius
    world.participants[1] = veh(30.0, 12.0, kind=W.Kind.BV)
    report = R.assess(world, cfg)[0]
    assert report.events[W.EVENT_LEAD_BRAKE]
    assert report.in_dcz
    assert report.risk == pytest.approx(
        cfg.lambda1 * report.ttc_norm + cfg.lambda2 * report.pet_norm
        + cfg.lambda3 * cfg.beta[W.EVENT_LEAD_BRAKE],
        abs=1e-15,
    )


def test_in_dcz_ttc_branch():
    cfg = R.RiskConfig()
    ego = veh(0.0, 15.0)
    lead = veh(12.3, 10.0, kind=W.Kind.BV)  # gap 7.5, closing 5: TTC 1.5 s
    world = make_world([ego, lead])
    report = R.assess(world, cfg)[0]
    assert report.ttc == pytest.approx(1.5, abs=1e-12)
    assert report.in_dcz


@given(closing=st.floats(0.5, 15.0), gap=st.floats(1.0, 90.0))
@settings(max_examples=150, deadline=None)
def test_risk_monotone_in_ttc(closing, gap):
    """A tighter gap at the same closing speed never lowers the risk."""
    cfg = R.RiskConfig()
    ego = veh(0.0, 15.0)
    far = veh(gap + W.VEH_LENGTH, 15.0 - closing, kind=W.Kind.BV)
    near = veh(gap * 0.5 + W.VEH_LENGTH, 15.0 - closing, kind=W.Kind.BV)
    risk_far = R.assess(make_world([ego, far]), cfg)[0].risk
    risk_near = R.assess(make_world([ego, near]), cfg)[0].risk
    assert risk_near >= risk_far


@given(gap=st.floats(0.2, 120.0), closing=st.floats(0.1, 20.0))
@settings(max_examples=150, deadline=None)
def test_full_ttc_urgency_implies_dcz(gap, closing):
    cfg = R.RiskConfig()
    ego = veh(0.0, closing)
    lead = veh(gap + W.VEH_LENGTH, 0.0, kind=W.Kind.BV)
    report = R.assess(make_world([ego, lead]), cfg)[0]
    if report.ttc_norm == 1.0:
        assert report.in_dcz
    # without pedestrians or events, risk past lambda1 + lambda2 needs the zone
    if report.risk > cfg.lambda1 + cfg.lambda2:
        assert report.in_dcz


def test_risk_bounds_on_rollouts():
    cfg = R.RiskConfig()
    rng = np.random.default_rng(0)
    for scenario in W.SCENARIOS:
        world = W.instantiate_scenario(W.ScenarioSpec(scenario_id=scenario, seed=13))
        for _ in range(60):
            acts = {
                i: (float(rng.uniform(-3, 3)), float(rng.uniform(-8, 8)))
                for i in world.av_indices
            }
            W.step_world(world, acts)
            if W.check_termination(world).done:
                break
            _, scene = R.risk_of(world, cfg)
            assert cfg.w0 <= scene <= 1.0


# ---------------------------------------------------------------------------
# safety weight


def test_safety_weight_branches():
    cfg = R.RiskConfig()
    assert R.safety_weight(cfg.tau_risk, cfg) == cfg.alpha0  # boundary takes the high branch
    assert R.safety_weight(cfg.w0, cfg) == pytest.approx(1.0 - cfg.alpha0)
    assert R.safety_weight(0.9, cfg) == 0.8
    assert R.safety_weight(0.2, cfg) == pytest.approx(0.2)


def test_safety_weight_rejects_out_of_range():
    cfg = R.RiskConfig()
    with pytest.raises(ValueError):
        R.safety_weight(-0.1, cfg)
    with pytest.raises(ValueError):
        R.safety_weight(1.5, cfg)


def test_safety_weight_values_in_open_interval():
    cfg = R.RiskConfig()
    for value in np.linspace(cfg.w0, 1.0, 25):
        a = R.safety_weight(float(value), cfg)
        assert a in (cfg.alpha0, 1.0 - cfg.alpha0)
        assert 0.0 < a < 1.0


# ---------------------------------------------------------------------------
# config validation


def test_config_rejects_bad_alpha0():
    with pytest.raises(ValueError):
        R.RiskConfig(alpha0=0.5)
    with pytest.raises(ValueError):
        R.RiskConfig(alpha0=1.0)


def test_config_rejects_bad_weights():
    with pytest.raises(ValueError):
        R.RiskConfig(lambda1=-0.1)
    with pytest.raises(ValueError):
        R.RiskConfig(beta={"a": 0.7, "b": 0.5})
    with pytest.raises(ValueError):
        R.RiskConfig(w0=0.0)
    with pytest.raises(ValueError):
        R.RiskConfig(tau_v2v=0.0)


def test_scene_risk_requires_reports():
    with pytest.raises(ValueError):
        R.scene_risk([])
