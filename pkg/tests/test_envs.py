import itertools

import numpy as np
import pytest

from flowrl.envs import (
    DemoSet, EnvBatch, EnvError, GRASP_BONUS, MAX_MOVE, MIN_SEPARATION, TaskSpec, chunk_episode, gen_demos,
    scripted_expert, step_primitive, to_env_space, to_policy_space,
)


def single(spec=None, seed=0):
    env = EnvBatch(spec or TaskSpec(task_id=0), 1, seed)
    env.reset()
    return env


def run_expert(spec, n, seed=0, jitter=0.0):
    env = EnvBatch(spec, n, seed)
    env.reset()
    rng = np.random.default_rng(seed + 1)
    live = np.ones(n, dtype=bool)
    returns = np.zeros(n)
    while live.any():
        _, r, d = env.step(scripted_expert(env, jitter, rng), live)
        returns += r
        live &= ~d
    return env, returns


# -- task spec -------------------------------------------------------------

def test_observation_dimension():
    spec = TaskSpec(n_objects=4, n_receptacles=4)
    assert spec.d_obs == 7 + 16
    assert single(spec).observe().shape == (1, spec.d_obs)


@pytest.mark.parametrize("kw,field", [({"task_id": 16}, "task_id"), ({"horizon": 42}, "horizon"),
                                      ({"task_family": "stack"}, "task_family"), ({"n_objects": 0}, "n_objects")])
def test_spec_validation_names_field(kw, field):
    with pytest.raises(ValueError, match=field):
        TaskSpec(**kw).validate(chunk_size=5)


# -- reset -----------------------------------------------------------------

def test_reset_is_deterministic():
    a = EnvBatch(TaskSpec(), 8, seed=3).reset()
    b = EnvBatch(TaskSpec(), 8, seed=3).reset()
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, EnvBatch(TaskSpec(), 8, seed=4).reset())


def test_reset_layout_constraints():
    env = EnvBatch(TaskSpec(), 200, seed=0)
    env.reset()
    for i in range(env.n):
        pts = np.concatenate([env.gripper[i : i + 1], env.objects[i], env.receptacles[i]])
        assert pts.min() >= 0.1 and pts.max() <= 0.9
        for p, q in itertools.combinations(pts, 2):
            assert np.hypot(*(p - q)) >= MIN_SEPARATION
    assert not env.holding.any()
    assert np.all(env.step_count == 0)
    assert np.all(env.observe()[:, 6] == 0.0)


def test_reset_with_explicit_seeds_matches():
    env = EnvBatch(TaskSpec(), 3, seed=0)
    obs = env.reset(seeds=[11, 11, 12])
    np.testing.assert_array_equal(obs[0], obs[1])
    assert not np.array_equal(obs[0], obs[2])


def test_placement_failure_raises():
    spec = TaskSpec(n_objects=20, n_receptacles=20)
    with pytest.raises(EnvError, match="place"):
        EnvBatch(spec, 1).reset()


# -- dynamics ----------------------------------------------------------------

def test_motion_toward_object_reduces_distance():
    env = single()
    obj = env.target_object[0].copy()
    before = np.hypot(*(env.gripper[0] - obj))
    direction = (obj - env.gripper[0]) / before
    step_primitive(env, [*(0.5 * MAX_MOVE * direction), -1.0])
    assert np.hypot(*(env.gripper[0] - obj)) < before


def test_motion_is_clamped():
    env = single()
    start = env.gripper[0].copy()
    step_primitive(env, [5.0, -5.0, -1.0])
    np.testing.assert_allclose(env.gripper[0], np.clip(start + [MAX_MOVE, -MAX_MOVE], 0, 1), atol=1e-15)


def test_grasp_bonus_paid_once():
    env = single()
    oi = env.target_obj_index[0]
    env.gripper[0] = env.objects[0, oi] + [0.04, 0.0]
    _, r, _ = step_primitive(env, [0.0, 0.0, 1.0])
    assert env.holding[0] and r == pytest.approx(GRASP_BONUS)
    _, r, _ = step_primitive(env, [0.0, 0.0, -1.0])  # release
    assert not env.holding[0] and r == 0.0
    _, r, _ = step_primitive(env, [0.0, 0.0, 1.0])  # re-grasp
    assert env.holding[0] and r == 0.0


def test_no_grasp_out_of_reach():
    env = single()
    oi = env.target_obj_index[0]
    env.gripper[0] = env.objects[0, oi] + [0.06, 0.0]
    _, r, _ = step_primitive(env, [0.0, 0.0, 1.0])
    assert not env.holding[0] and r == 0.0


def test_held_object_tracks_gripper():
    env = single()
    oi = env.target_obj_index[0]
    env.gripper[0] = env.objects[0, oi].copy()
    step_primitive(env, [0.0, 0.0, 1.0])
    step_primitive(env, [0.07, 0.03, 1.0])
    np.testing.assert_array_equal(env.objects[0, oi], env.gripper[0])


def test_place_and_release_succeeds():
    env = single()
    oi, rec = env.target_obj_index[0], env.target_receptacle[0].copy()
    env.gripper[0] = env.objects[0, oi].copy()
    step_primitive(env, [0.0, 0.0, 1.0])
    env.gripper[0] = rec + [0.03, 0.0]
    env.objects[0, oi] = env.gripper[0]
    _, r, d = step_primitive(env, [0.0, 0.0, -1.0])
    assert d and r == 1.0 and env.success[0]


def test_horizon_ends_episode_without_reward():
    env = single(TaskSpec(task_id=0, horizon=5))
    total = 0.0
    for t in range(5):
        _, r, d = step_primitive(env, [0.0, 0.0, -1.0])
        total += r
        assert d == (t == 4)
    assert total == 0.0


def test_nan_action_raises_with_index():
    env = EnvBatch(TaskSpec(), 3)
    env.reset()
    a = np.zeros((3, 3))
    a[2, 1] = np.nan
    with pytest.raises(EnvError, match="env 2"):
        env.step(a)


def test_inactive_nan_is_ignored():
    env = EnvBatch(TaskSpec(), 2)
    env.reset()
    a = np.zeros((2, 3))
    a[1] = np.nan
    env.step(a, np.array([True, False]))


def test_dynamics_replay_is_exact():
    rng = np.random.default_rng(0)
    actions = rng.uniform(-0.15, 0.15, size=(40, 4, 3))
    runs = []
    for _ in range(2):
        env = EnvBatch(TaskSpec(), 4, seed=9)
        env.reset()
        runs.append(np.stack([env.step(a)[0] for a in actions]))
    assert np.max(np.abs(runs[0] - runs[1])) <= 1e-15


def test_step_chunk_stops_after_done():
    env = single(TaskSpec(task_id=0, horizon=5))
    _, total, done, executed = env.step_chunk(np.zeros((1, 5, 3)))
    assert done[0] and executed[0] == 5 and total[0] == 0.0
    env = single(TaskSpec(task_id=0, horizon=10))
    env.step_count[0] = 7
    _, _, done, executed = env.step_chunk(np.zeros((1, 5, 3)))
    assert done[0] and executed[0] == 3 and env.step_count[0] == 10


def test_point_reach_success():
    env = single(TaskSpec("point_reach", task_id=0))
    env.gripper[0] = env.target_object[0] + [0.08, 0.0]
    _, r, d = step_primitive(env, [-0.05, 0.0, -1.0])
    assert d and r == 1.0


# -- scripted expert ---------------------------------------------------------

def test_expert_solves_every_episode():
    env, returns = run_expert(TaskSpec(), 1000, seed=0)
    assert env.success.all()
    assert set(np.round(returns, 12)) <= {0.0, 0.1, 1.0, 1.1}
    assert np.all(np.round(returns, 12) == 1.1)


def test_expert_with_jitter():
    env, _ = run_expert(TaskSpec(), 1000, seed=1, jitter=0.01)
    assert env.success.mean() >= 0.95


def test_expert_solves_every_task_id():
    for task in range(16):
        env, _ = run_expert(TaskSpec(task_id=task), 20, seed=task)
        assert env.success.all(), task
        assert np.all(env.task == task)


def test_expert_point_reach():
    env, returns = run_expert(TaskSpec("point_reach"), 200)
    assert env.success.all() and np.all(returns == 1.0)


def test_episode_returns_on_random_play():
    env = EnvBatch(TaskSpec(), 300, seed=2)
    env.reset()
    rng = np.random.default_rng(0)
    returns, live = np.zeros(300), np.ones(300, dtype=bool)
    while live.any():
        _, r, d = env.step(rng.uniform(-0.1, 0.1, (300, 3)) + [0, 0, 0.5], live)
        returns += r
        live &= ~d
    assert set(np.round(returns, 12)) <= {0.0, 0.1, 1.0, 1.1}
    assert np.all(np.round(returns[env.success], 12) >= 1.0)


# -- demos -------------------------------------------------------------------

def test_chunking_40_steps_gives_8_chunks():
    obs = np.arange(41, dtype=float)[:, None]
    acts = np.arange(40, dtype=float)[:, None].repeat(3, axis=1)
    o, c = chunk_episode(obs, acts, 5)
    assert o.shape == (8, 1) and c.shape == (8, 5, 3)
    np.testing.assert_array_equal(o[:, 0], [0, 5, 10, 15, 20, 25, 30, 35])


def test_partial_chunk_repeats_last_action():
    acts = np.arange(7, dtype=float)[:, None].repeat(3, axis=1)
    _, c = chunk_episode(np.zeros((8, 2)), acts, 5)
    np.testing.assert_array_equal(c[1, :, 0], [5, 6, 6, 6, 6])


def test_action_space_round_trip():
    raw = np.array([[0.05, -0.1, 1.0]])
    np.testing.assert_array_equal(to_policy_space(raw), [[0.5, -1.0, 1.0]])
    np.testing.assert_allclose(to_env_space(to_policy_space(raw)), raw, rtol=0, atol=1e-16)


def test_demo_chunks_replay_to_success():
    spec = TaskSpec(task_id=None)
    demos = gen_demos(spec, 12, 5, seed=4)
    assert demos.meta["expert_successes"] == 12
    env = EnvBatch(spec, 1)
    for ep, seed in enumerate(demos.meta["episode_seeds"]):
        env.reset(seeds=[seed])
        rows = np.flatnonzero(demos.episode_index == ep)
        np.testing.assert_array_equal(env.observe()[0], demos.obs[rows[0]])
        for r in rows:
            env.step_chunk(to_env_space(demos.chunks[r])[None])
        assert env.success[0]


def test_demo_file_round_trip(tmp_path):
    demos = gen_demos(TaskSpec(), 5, 5, seed=0, jitter=0.01)
    demos.save(tmp_path / "d.bin")
    loaded = DemoSet.load(tmp_path / "d.bin")
    assert loaded.obs.tobytes() == demos.obs.tobytes()
    assert loaded.chunks.tobytes() == demos.chunks.tobytes()
    np.testing.assert_array_equal(loaded.episode_index, demos.episode_index)
    assert loaded.meta == demos.meta
    assert loaded.n_episodes == 5
    loaded.save(tmp_path / "e.bin")
    assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "e.bin").read_bytes()


def test_demo_file_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"junkjunkjunk")
    with pytest.raises(ValueError, match="demo file"):
        DemoSet.load(tmp_path / "x.bin")


def test_gen_demos_rejects_zero_episodes():
    with pytest.raises(ValueError):
        gen_demos(TaskSpec(), 0, 5)
