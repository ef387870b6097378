"""Policy tests: action table, masks, networks, fusion, checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saferes import policy as P
from saferes import risk as R
from saferes import world as W


def make_world(scenario="LVEB", seed=0, **ranges):
    spec = W.ScenarioSpec(scenario_id=scenario, seed=seed, ranges=ranges)
    return W.instantiate_scenario(spec)


def place_av(world, x=None, y=None, theta=None, v=None):
    p = world.participants[0]
    world.participants[0] = W.ParticipantState(
        x=p.x if x is None else x,
        y=p.y if y is None else y,
        theta=p.theta if theta is None else theta,
        v=p.v if v is None else v,
        lane=W.lane_from_y(p.y if y is None else y),
        kind=W.Kind.AV,
    )
    world.invalidate()


# ---------------------------------------------------------------------------
# action table


def test_action_table_coupling():
    assert P.N_ACCEL * P.N_STEER == 143
    assert P.N_ACCEL + P.N_STEER - 1 == 23
    assert P.ACTION_TABLE.shape == (23, 2)


def test_action_table_structure():
    table = P.ACTION_TABLE
    # 11 pure-acceleration rows, then 12 pure-steer rows
    assert np.all(table[: P.N_ACCEL, 1] == 0.0)
    assert np.all(table[P.N_ACCEL :, 0] == 0.0)
    assert np.all(table[P.N_ACCEL :, 1] != 0.0)
    assert sorted(table[: P.N_ACCEL, 0]) == list(np.linspace(-W.A_MAX, W.A_MAX, 11))
    assert len({tuple(row) for row in table}) == 23
    assert tuple(table[P.IDLE_ACTION]) == (0.0, 0.0)


def test_action_table_bounds():
    assert np.abs(P.ACTION_TABLE[:, 0]).max() == W.A_MAX
    assert np.abs(P.ACTION_TABLE[:, 1]).max() == W.DELTA_MAX


# ---------------------------------------------------------------------------
# masks


def test_mask_no_reverse_at_standstill():
    world = make_world()
    place_av(world, v=0.0)
    mask = P.mask_actions(world, 0)
    accels = P.ACTION_TABLE[:, 0]
    assert not mask[accels < 0].any()
    assert mask[P.IDLE_ACTION]


def test_mask_blocks_accel_under_ttc():
    world = make_world("LVEB", seed=1)
    av = world.participants[0]
    lead_idx = world.scripts[0].index
    lead = world.participants[lead_idx]
    # park the lead one second ahead at full closing speed
    world.participants[lead_idx] = W.ParticipantState(
        x=av.x + W.VEH_LENGTH + av.v * 1.0, y=av.y, theta=0.0, v=0.0, lane=av.lane, kind=W.Kind.BV
    )
    world.invalidate()
    cfg = R.RiskConfig()
    assert R.min_forward_ttc(world, 0, cfg) < P.TAU_ACCEL
    mask = P.mask_actions(world, 0, cfg)
    accels = P.ACTION_TABLE[:, 0]
    assert not mask[accels > 0].any()
    assert mask[P.IDLE_ACTION]


def test_mask_right_edge_blocks_right_steer():
    world = make_world()
    place_av(world, y=W.ROAD_Y_MIN + 0.2, theta=350.0, v=12.0)
    mask = P.mask_actions(world, 0)
    steers = P.ACTION_TABLE[:, 1]
    assert not mask[steers < 0].any()
    assert mask[P.IDLE_ACTION]


def test_mask_left_edge_blocks_left_steer():
    world = make_world()
    place_av(world, y=W.ROAD_Y_MAX - 0.2, theta=10.0, v=12.0)
    mask = P.mask_actions(world, 0)
    steers = P.ACTION_TABLE[:, 1]
    assert not mask[steers > 0].any()


def test_mask_heading_nonworsening():
    world = make_world()
    place_av(world, y=3.5, theta=55.0, v=6.0)
    mask = P.mask_actions(world, 0)
    for k, (_, steer) in enumerate(P.ACTION_TABLE):
        if not mask[k] or k == P.IDLE_ACTION:
            continue
        nxt = W.step_vehicle(world.participants[0], P.ACTION_TABLE[k, 0], steer, world.dt)
        dev = abs(W.wrap180(nxt.theta))
        assert dev <= P.MAX_HEADING_DEV or dev < 55.0


def test_mask_lane_change_cooldown():
    world = make_world()
    place_av(world, y=0.0, theta=0.0, v=12.0)
    world.last_lane_change[0] = world.t  # just changed lanes
    mask = P.mask_actions(world, 0)
    for k in np.flatnonzero(mask):
        accel, steer = P.ACTION_TABLE[k]
        if steer == 0.0:
            continue
        nxt = W.step_vehicle(world.participants[0], accel, steer, world.dt)
        coast = W.step_vehicle(nxt, 0.0, 0.0, world.dt)
        assert nxt.lane == 0 and coast.lane == 0
    # after the cooldown expires the same steers become available again
    world.last_lane_change[0] = world.t - P.LANE_CHANGE_COOLDOWN - 0.1
    assert P.mask_actions(world, 0).sum() >= mask.sum()


def test_mask_idle_always_feasible():
    world = make_world()
    # heading far off the lane axis near the edge: everything else may drop out
    place_av(world, y=W.ROAD_Y_MIN + 0.1, theta=290.0, v=10.0)
    mask = P.mask_actions(world, 0)
    assert mask[P.IDLE_ACTION]
    assert mask.any()


def test_mask_open_road_mostly_feasible():
    world = make_world("LVEB", seed=2, lead_gap=(60.0, 60.0))
    mask = P.mask_actions(world, 0)
    assert mask[P.IDLE_ACTION]
    assert mask.sum() >= 15


# ---------------------------------------------------------------------------
# softmax helpers and sampling


def test_masked_softmax_zeroes_masked():
    logits = np.array([1.0, 2.0, 3.0, 4.0])
    mask = np.array([True, False, True, False])
    probs = P.masked_softmax(logits, mask)
    assert probs[1] == 0.0 and probs[3] == 0.0
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    e1, e3 = math.exp(1.0), math.exp(3.0)
    assert probs[0] == pytest.approx(e1 / (e1 + e3), rel=1e-12)


def test_masked_log_softmax_consistent():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 23))
    mask = rng.random((4, 23)) < 0.7
    mask[:, P.IDLE_ACTION] = True
    lp = P.masked_log_softmax(logits, mask)
    probs = P.masked_softmax(logits, mask)
    assert np.allclose(np.where(mask, np.exp(lp), 0.0), probs, atol=1e-12)


def test_sample_deterministic_dist():
    probs = np.zeros(P.N_ACTIONS)
    probs[7] = 1.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert P.sample_action(probs, rng) == 7


def test_sample_seeded_reproducible():
    probs = np.full(P.N_ACTIONS, 1.0 / P.N_ACTIONS)
    draws1 = [P.sample_action(probs, np.random.default_rng(42)) for _ in range(1)]
    draws2 = [P.sample_action(probs, np.random.default_rng(42)) for _ in range(1)]
    assert draws1 == draws2


def test_sample_frequencies():
    rng = np.random.default_rng(9)
    probs = np.zeros(P.N_ACTIONS)
    probs[2], probs[5], probs[11] = 0.2, 0.5, 0.3
    n = 100_000
    counts = np.zeros(P.N_ACTIONS)
    for _ in range(n):
        counts[P.sample_action(probs, rng)] += 1
    for idx in (2, 5, 11):
        p = probs[idx]
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(counts[idx] - n * p) <= 3.0 * sigma
    assert counts[probs == 0.0].sum() == 0


def test_greedy_action():
    probs = np.zeros(P.N_ACTIONS)
    probs[2], probs[5], probs[11] = 0.2, 0.5, 0.3
    assert P.greedy_action(probs) == 5


def test_validate_distribution_rejects_bad():
    with pytest.raises(P.PolicyError):
        P.validate_distribution(np.full(P.N_ACTIONS, 1.0))  # sums to 23
    with pytest.raises(P.PolicyError):
        P.validate_distribution(np.zeros(3))
    bad = np.full(P.N_ACTIONS, 1.0 / P.N_ACTIONS)
    bad[0] = math.nan
    with pytest.raises(P.PolicyError):
        P.validate_distribution(bad)


# ---------------------------------------------------------------------------
# hybrid fusion


def test_hybrid_endpoints_exact():
    rng = np.random.default_rng(1)
    task = rng.dirichlet(np.ones(P.N_ACTIONS))
    safe = rng.dirichlet(np.ones(P.N_ACTIONS))
    out0 = P.hybrid(task, safe, 0.0)
    assert np.array_equal(out0, task) and out0 is not task
    out1 = P.hybrid(task, safe, 1.0)
    assert np.array_equal(out1, safe) and out1 is not safe


def test_hybrid_hand_case():
    task = np.array([0.5, 0.5])
    safe = np.array([1.0, 0.0])
    out = P.hybrid(task, safe, 0.7)
    assert out == pytest.approx([0.85, 0.15], abs=1e-12)


def test_hybrid_rejects_bad_alpha():
    task = np.full(2, 0.5)
    with pytest.raises(P.PolicyError):
        P.hybrid(task, task, -0.01)
    with pytest.raises(P.PolicyError):
        P.hybrid(task, task, 1.01)
    with pytest.raises(P.PolicyError):
        P.hybrid(task, np.full(3, 1 / 3), 0.5)


@given(
    seed=st.integers(0, 10_000),
    alpha=st.floats(0.0, 1.0, allow_nan=False),
)
@settings(max_examples=300, deadline=None)
def test_hybrid_closure(seed, alpha):
    """Convex blends of distributions stay distributions, no renormalization."""
    rng = np.random.default_rng(seed)
    task = rng.dirichlet(np.ones(P.N_ACTIONS))
    safe = rng.dirichlet(np.ones(P.N_ACTIONS))
    out = P.hybrid(task, safe, alpha)
    assert out.min() >= -1e-15
    assert out.sum() == pytest.approx(1.0, abs=1e-9)


@given(seed=st.integers(0, 10_000), alpha=st.floats(0.0, 1.0))
@settings(max_examples=200, deadline=None)
def test_hybrid_argmax_dominance(seed, alpha):
    rng = np.random.default_rng(seed)
    task = rng.dirichlet(np.ones(8))
    safe = rng.dirichlet(np.ones(8))
    if task.argmax() != safe.argmax():
        return
    out = P.hybrid(task, safe, alpha)
    assert out.argmax() == task.argmax()


# ---------------------------------------------------------------------------
# approximators


TINY = P.ApproximatorSpec(node_dim=6, graph_dim=4, hidden=(5,), extra_dim=0, n_actions=3)
TINY_EXTRA = P.ApproximatorSpec(node_dim=6, graph_dim=4, hidden=(5,), extra_dim=3, n_actions=3)


def test_param_count_formula():
    # one graph layer, one hidden layer, two heads
    expected = (6 * 4 + 4) + (4 * 5 + 5) + (5 * 3 + 3) + (5 * 1 + 1)
    assert TINY.param_count == expected
    assert TINY.param_count <= 500


def test_unpack_views_share_memory():
    params = P.init_params(TINY, seed=0)
    layers = P.unpack(params.values, TINY)
    w0 = layers[0][0]
    w0[0, 0] = 123.0
    assert params.values[0] == 123.0
    with pytest.raises(P.PolicyError):
        P.unpack(np.zeros(TINY.param_count + 1), TINY)


def test_zero_params_uniform_policy():
    values = np.zeros(TINY.param_count)
    params = P.ParamSet(values=values)
    nodes = np.random.default_rng(0).normal(size=(2, 6))
    adj = np.ones((2, 2))
    logits, value = P.forward_single(params, TINY, nodes, adj, 0)
    assert np.all(logits == 0.0)
    assert value == 0.0
    mask = np.array([True, True, False])
    probs = P.masked_softmax(logits, mask)
    assert probs == pytest.approx([0.5, 0.5, 0.0], abs=1e-12)


def test_forward_deterministic():
    params = P.init_params(TINY, seed=3)
    nodes = np.random.default_rng(1).normal(size=(3, 6))
    adj = np.eye(3)
    a = P.forward_single(params, TINY, nodes, adj, 1)
    b = P.forward_single(params, TINY, nodes, adj, 1)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_single_node_aggregation_by_hand():
    """Mean aggregation over a self-loop-only graph returns the node's own features."""
    spec = P.ApproximatorSpec(node_dim=W.VEH_DIM, graph_dim=4, hidden=(5,), extra_dim=0, n_actions=3)
    params = P.init_params(spec, seed=7)
    rng = np.random.default_rng(2)
    nodes = rng.normal(size=(1, W.VEH_DIM))
    adj = np.ones((1, 1))
    logits, value = P.forward_single(params, spec, nodes, adj, 0)
    layers = P.unpack(params.values, spec)
    scaled = P._scale_nodes(nodes)[0]
    h = np.tanh(scaled @ layers[0][0] + layers[0][1])
    z = np.tanh(h @ layers[1][0] + layers[1][1])
    want_logits = z @ layers[2][0] + layers[2][1]
    want_value = float(z @ layers[3][0][:, 0] + layers[3][1][0])
    assert logits == pytest.approx(want_logits, rel=1e-12)
    assert value == pytest.approx(want_value, rel=1e-12)


def test_forward_extra_input_required():
    params = P.init_params(TINY_EXTRA, seed=0)
    nodes = np.zeros((1, 2, 6))
    adj = np.ones((1, 2, 2))
    with pytest.raises(P.PolicyError):
        P.forward_batch(params, TINY_EXTRA, nodes, adj, np.array([0]), None)
    logits, values, _ = P.forward_batch(
        params, TINY_EXTRA, nodes, adj, np.array([0]), np.zeros((1, 3))
    )
    assert logits.shape == (1, 3) and values.shape == (1,)


def _fd_gradient(fn, params, step=1e-6):
    grad = np.zeros_like(params.values)
    for k in range(params.values.size):
        params.values[k] += step
        hi = fn()
        params.values[k] -= 2 * step
        lo = fn()
        params.values[k] += step
        grad[k] = (hi - lo) / (2 * step)
    return grad


@pytest.mark.parametrize("spec", [TINY, TINY_EXTRA], ids=["plain", "with-extra"])
def test_backward_matches_finite_differences(spec):
    rng = np.random.default_rng(11)
    params = P.init_params(spec, seed=5)
    batch = 3
    n = 2
    nodes = rng.normal(size=(batch, n, spec.node_dim))
    adj = np.ones((batch, n, n))
    ego = np.array([0, 1, 0])
    extra = rng.normal(size=(batch, spec.extra_dim)) if spec.extra_dim else None
    dlogits = rng.normal(size=(batch, spec.n_actions))
    dvalues = rng.normal(size=batch)

    def loss():
        logits, values, _ = P.forward_batch(params, spec, nodes, adj, ego, extra)
        return float((dlogits * logits).sum() + (dvalues * values).sum())

    logits, values, cache = P.forward_batch(params, spec, nodes, adj, ego, extra)
    grad = P.backward_batch(params, spec, cache, dlogits, dvalues)
    fd = _fd_gradient(loss, params)
    denom = np.maximum(np.abs(fd), 1e-6)
    assert np.max(np.abs(grad - fd) / denom) <= 1e-4


def test_backward_zero_cotangent():
    params = P.init_params(TINY, seed=1)
    nodes = np.zeros((1, 1, 6))
    adj = np.ones((1, 1, 1))
    _, _, cache = P.forward_batch(params, TINY, nodes, adj, np.array([0]), None)
    grad = P.backward_batch(params, TINY, cache, np.zeros((1, 3)), np.zeros(1))
    assert np.all(grad == 0.0)


# ---------------------------------------------------------------------------
# projection and parameter budget


def test_project_interior_identity():
    params = P.ParamSet(values=np.array([1.0, 2.0]), cap=10.0)
    before = params.values.copy()
    P.project(params)
    assert np.array_equal(params.values, before)


def test_project_scales_to_cap():
    params = P.ParamSet(values=np.array([3.0, 4.0]), cap=1.0)
    P.project(params)
    assert params.values == pytest.approx([0.6, 0.8], abs=1e-12)
    assert params.norm == pytest.approx(1.0, abs=1e-12)


def test_project_zero_vector():
    params = P.ParamSet(values=np.zeros(4), cap=1.0)
    P.project(params)
    assert np.all(params.values == 0.0)


def test_project_idempotent():
    rng = np.random.default_rng(8)
    params = P.ParamSet(values=rng.normal(size=50) * 10, cap=2.0)
    P.project(params)
    once = params.values.copy()
    P.project(params)
    assert np.array_equal(params.values, once)


def test_parameter_budget():
    assert P.SAFE_SPEC.param_count <= P.PARAM_BUDGET_RATIO * P.TASK_SPEC.param_count
    pair = P.PolicyPair.fresh(seed=0)
    assert pair.safe.cap <= P.PARAM_BUDGET_RATIO * pair.task.cap + 1e-12


def test_policy_pair_rejects_oversized_safety():
    big = P.ApproximatorSpec(graph_dim=64, hidden=(128, 128), extra_dim=P.N_ACTIONS)
    with pytest.raises(P.PolicyError):
        P.PolicyPair(
            task=P.init_params(P.TASK_SPEC, seed=0),
            safe=P.init_params(big, seed=1),
            safe_spec=big,
        )


def test_policy_pair_rejects_oversized_cap():
    safe = P.init_params(P.SAFE_SPEC, seed=1)
    safe.cap = P.DEFAULT_NORM_CAP  # full task share
    with pytest.raises(P.PolicyError):
        P.PolicyPair(task=P.init_params(P.TASK_SPEC, seed=0), safe=safe)


def test_init_params_within_cap():
    for seed in range(3):
        params = P.init_params(P.TASK_SPEC, cap=5.0, seed=seed)
        assert params.norm <= 5.0 + 1e-9


# ---------------------------------------------------------------------------
# policy_step


def test_policy_step_samples_feasible():
    world = make_world("OPI", seed=3)
    pair = P.PolicyPair.fresh(seed=0)
    nodes, adj, ego = W.ego_graph(world, 0)
    mask = P.mask_actions(world, 0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        choice = P.policy_step(pair, nodes, adj, ego, mask, 0.8, rng=rng)
        assert mask[choice.index]
        assert choice.hybrid_probs[choice.index] > 0.0
    greedy = P.policy_step(pair, nodes, adj, ego, mask, 0.2, greedy=True)
    assert greedy.index == int(np.argmax(greedy.hybrid_probs))
    with pytest.raises(P.PolicyError):
        P.policy_step(pair, nodes, adj, ego, mask, 0.5)  # sampling without a generator


def test_policy_step_alpha_blend():
    world = make_world("LVEB", seed=4)
    pair = P.PolicyPair.fresh(seed=2)
    nodes, adj, ego = W.ego_graph(world, 0)
    mask = P.mask_actions(world, 0)
    choice = P.policy_step(pair, nodes, adj, ego, mask, 0.3, greedy=True)
    want = P.hybrid(choice.task_probs, choice.safe_probs, 0.3)
    assert np.array_equal(choice.hybrid_probs, want)
    assert choice.logp_task == pytest.approx(float(np.log(choice.task_probs[choice.index])))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    pair = P.PolicyPair.fresh(seed=6)
    path = str(tmp_path / "ckpt.npz")
    P.save_checkpoint(
        path, "drs-ppo", pair.task, pair.task_spec, pair.safe, pair.safe_spec,
        meta={"episodes": 12},
    )
    ckpt = P.load_checkpoint(path)
    assert ckpt.algo == "drs-ppo"
    assert np.array_equal(ckpt.task.values, pair.task.values)
    assert np.array_equal(ckpt.safe.values, pair.safe.values)
    assert ckpt.task.cap == pair.task.cap
    assert ckpt.safe.cap == pair.safe.cap
    assert ckpt.task_spec == pair.task_spec
    assert ckpt.safe_spec == pair.safe_spec
    assert ckpt.meta == {"episodes": 12}
    assert np.array_equal(ckpt.action_table, P.ACTION_TABLE)
    loaded_pair = ckpt.pair()
    assert np.array_equal(loaded_pair.task.values, pair.task.values)


def test_checkpoint_single_stream(tmp_path):
    params = P.init_params(P.TASK_SPEC, seed=1)
    path = str(tmp_path / "solo.npz")
    P.save_checkpoint(path, "cppo", params, P.TASK_SPEC)
    ckpt = P.load_checkpoint(path)
    assert ckpt.safe is None
    with pytest.raises(P.PolicyError):
        ckpt.pair()


def test_checkpoint_rejects_bad_version(tmp_path):
    pair = P.PolicyPair.fresh(seed=0)
    path = str(tmp_path / "old.npz")
    P.save_checkpoint(path, "drs-ppo", pair.task, pair.task_spec, pair.safe, pair.safe_spec)
    with np.load(path, allow_pickle=False) as data:
        payload = {k: data[k] for k in data.files}
    payload["version"] = np.int64(99)
    np.savez(path, **payload)
    with pytest.raises(P.PolicyError):
        P.load_checkpoint(path)


def test_checkpoint_requires_spec_for_safety(tmp_path):
    pair = P.PolicyPair.fresh(seed=0)
    with pytest.raises(P.PolicyError):
        P.save_checkpoint(str(tmp_path / "x.npz"), "drs-ppo", pair.task, pair.task_spec, pair.safe)
