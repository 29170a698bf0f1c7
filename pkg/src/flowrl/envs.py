"""Vectorized 2-D kinematic reach and pick-and-place tasks.

Positions live in the unit square.  A primitive action is
``[dx, dy, grip]``; motion is clipped to ``+-MAX_MOVE`` per axis.  Policies
act in a normalized space where motion is divided by ``MAX_MOVE``, see
:data:`ACTION_SCALE`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAX_MOVE = 0.1
GRASP_RADIUS = 0.05
GRASP_BONUS = 0.1
SUCCESS_REWARD = 1.0
MIN_SEPARATION = 0.15
PLACE_LOW, PLACE_HIGH = 0.1, 0.9
MAX_PLACEMENT_TRIES = 1000
EXPERT_GAIN = 0.5
ACTION_SCALE = np.array([MAX_MOVE, MAX_MOVE, 1.0])
ACTION_DIM = 3

TASK_FAMILIES = ("point_reach", "pick_place")


class EnvError(RuntimeError):
    pass


@dataclass
class TaskSpec:
    task_family: str = "pick_place"
    n_objects: int = 4
    n_receptacles: int = 4
    task_id: int | None = None  # None: a task is drawn at every reset
    horizon: int = 40
    success_radius: float = 0.05

    @property
    def n_tasks(self) -> int:
        return self.n_objects * self.n_receptacles

    @property
    def d_obs(self) -> int:
        return 7 + self.n_tasks

    def validate(self, chunk_size: int | None = None) -> None:
        if self.task_family not in TASK_FAMILIES:
            raise ValueError(f"invalid task_family={self.task_family!r}; expected one of {TASK_FAMILIES}")
        if self.n_objects < 1:
            raise ValueError(f"invalid n_objects={self.n_objects!r}")
        if self.n_receptacles < 1:
            raise ValueError(f"invalid n_receptacles={self.n_receptacles!r}")
        if self.task_id is not None and not 0 <= self.task_id < self.n_tasks:
            raise ValueError(f"invalid task_id={self.task_id!r}; must be < {self.n_tasks}")
        if self.horizon < 1 or (chunk_size and self.horizon % chunk_size):
            raise ValueError(f"invalid horizon={self.horizon!r}; must be a positive multiple of the chunk size")
        if not self.success_radius > 0:
            raise ValueError(f"invalid success_radius={self.success_radius!r}")


class EnvBatch:
    """``n_envs`` independent environments advanced in lockstep.

    Each environment owns its generator, spawned from ``seed``; ``reset`` can
    instead take explicit per-env seeds so several envs start identically.
    """

    def __init__(self, spec: TaskSpec, n_envs: int, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.n = int(n_envs)
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(self.n)]
        self.gripper = np.zeros((self.n, 2))
        self.objects = np.zeros((self.n, spec.n_objects, 2))
        self.receptacles = np.zeros((self.n, spec.n_receptacles, 2))
        self.task = np.zeros(self.n, dtype=np.int64)
        self.holding = np.zeros(self.n, dtype=bool)
        self.grasped_once = np.zeros(self.n, dtype=bool)
        self.success = np.zeros(self.n, dtype=bool)
        self.step_count = np.zeros(self.n, dtype=np.int64)

    # -- geometry helpers ---------------------------------------------

    @property
    def target_obj_index(self) -> np.ndarray:
        return self.task // self.spec.n_receptacles

    @property
    def target_rec_index(self) -> np.ndarray:
        return self.task % self.spec.n_receptacles

    @property
    def target_object(self) -> np.ndarray:
        return self.objects[np.arange(self.n), self.target_obj_index]

    @property
    def target_receptacle(self) -> np.ndarray:
        return self.receptacles[np.arange(self.n), self.target_rec_index]

    def observe(self) -> np.ndarray:
        onehot = np.zeros((self.n, self.spec.n_tasks))
        onehot[np.arange(self.n), self.task] = 1.0
        return np.concatenate(
            [self.gripper, self.target_object, self.target_receptacle,
             self.holding[:, None].astype(np.float64), onehot],
            axis=1,
        )

    def _place(self, rng: np.random.Generator) -> np.ndarray:
        count = 1 + self.spec.n_objects + self.spec.n_receptacles
        pts: list[np.ndarray] = []
        tries = 0
        while len(pts) < count:
            tries += 1
            if tries > MAX_PLACEMENT_TRIES:
                raise EnvError(f"could not place {count} points with separation {MIN_SEPARATION}")
            p = rng.uniform(PLACE_LOW, PLACE_HIGH, size=2)
            if all(np.hypot(*(p - q)) >= MIN_SEPARATION for q in pts):
                pts.append(p)
        return np.array(pts)

    def reset(self, indices=None, seeds=None) -> np.ndarray:
        idx = np.arange(self.n) if indices is None else np.atleast_1d(indices)
        for j, i in enumerate(idx):
            rng = self.rngs[i] if seeds is None else np.random.default_rng(int(seeds[j]))
            pts = self._place(rng)
            no = self.spec.n_objects
            self.gripper[i] = pts[0]
            self.objects[i] = pts[1 : 1 + no]
            self.receptacles[i] = pts[1 + no :]
            self.task[i] = self.spec.task_id if self.spec.task_id is not None else rng.integers(self.spec.n_tasks)
            self.holding[i] = False
            self.grasped_once[i] = False
            self.success[i] = False
            self.step_count[i] = 0
        return self.observe()

    # -- dynamics -----------------------------------------------------

    def step(self, actions: np.ndarray, active: np.ndarray | None = None):
        """One primitive step for every env where ``active``; raw action units.

        Returns ``(obs, reward, done)``.  Inactive envs are left untouched
        and report zero reward.
        """
        actions = np.asarray(actions, dtype=np.float64).reshape(self.n, ACTION_DIM)
        act = np.ones(self.n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
        bad = act & ~np.all(np.isfinite(actions), axis=1)
        if bad.any():
            raise EnvError(f"non-finite action for env {int(np.flatnonzero(bad)[0])}")
        rows = np.flatnonzero(act)
        reward = np.zeros(self.n)
        done = np.zeros(self.n, dtype=bool)
        if rows.size == 0:
            return self.observe(), reward, done
        a = actions[rows]
        move = np.clip(a[:, :2], -MAX_MOVE, MAX_MOVE)
        self.gripper[rows] = np.clip(self.gripper[rows] + move, 0.0, 1.0)
        oi = self.target_obj_index[rows]
        held = self.holding[rows]
        self.objects[rows[held], oi[held]] = self.gripper[rows[held]]
        obj = self.objects[rows, oi]
        rec = self.receptacles[rows, self.target_rec_index[rows]]
        if self.spec.task_family == "pick_place":
            grip = a[:, 2]
            near = np.hypot(*(self.gripper[rows] - obj).T) <= GRASP_RADIUS
            grasp = (grip > 0) & ~held & near
            bonus = grasp & ~self.grasped_once[rows]
            reward[rows] += np.where(bonus, GRASP_BONUS, 0.0)
            self.grasped_once[rows] |= grasp
            released = (grip <= 0) & held
            self.holding[rows] = (held | grasp) & ~released
            placed = ~self.holding[rows] & self.grasped_once[rows] & (
                np.hypot(*(obj - rec).T) <= self.spec.success_radius
            )
        else:
            placed = np.hypot(*(self.gripper[rows] - obj).T) <= self.spec.success_radius
        reward[rows] += np.where(placed, SUCCESS_REWARD, 0.0)
        self.success[rows] |= placed
        self.step_count[rows] += 1
        done[rows] = placed | (self.step_count[rows] >= self.spec.horizon)
        return self.observe(), reward, done

    def step_chunk(self, chunk: np.ndarray, active: np.ndarray | None = None):
        """Execute ``H`` primitive actions open-loop (raw units, ``(n, H, 3)``).

        Envs that finish mid-chunk skip the remaining actions.  Returns
        ``(obs, summed_reward, done, n_executed)``.
        """
        chunk = np.asarray(chunk, dtype=np.float64)
        live = np.ones(self.n, dtype=bool) if active is None else np.array(active, dtype=bool)
        total = np.zeros(self.n)
        done = np.zeros(self.n, dtype=bool)
        executed = np.zeros(self.n, dtype=np.int64)
        for j in range(chunk.shape[1]):
            if not live.any():
                break
            _, r, d = self.step(chunk[:, j], live)
            total += r
            executed += live
            done |= d
            live &= ~d
        return self.observe(), total, done, executed


def step_primitive(env: EnvBatch, action):
    """Single-env convenience around :meth:`EnvBatch.step`."""
    obs, r, d = env.step(np.asarray(action, dtype=np.float64)[None, :] if env.n == 1 else action)
    if env.n == 1:
        return obs[0], float(r[0]), bool(d[0])
    return obs, r, d


def scripted_expert(
    env: EnvBatch, jitter: float = 0.0, rng: np.random.Generator | None = None, gain: float = EXPERT_GAIN
) -> np.ndarray:
    """Proportional controller: reach the target object, grasp, carry, release.

    ``gain`` below 1 keeps the final approach smooth, so an open-loop chunk
    is close to linear in the observed positions.
    """
    obj, rec = env.target_object, env.target_receptacle
    if env.spec.task_family == "point_reach":
        goal = obj
    else:
        goal = np.where(env.holding[:, None], rec, obj)
    motion = gain * (goal - env.gripper)
    if jitter > 0.0:
        rng = np.random.default_rng(0) if rng is None else rng
        motion = motion + rng.normal(0.0, jitter, size=motion.shape)
    motion = np.clip(motion, -MAX_MOVE, MAX_MOVE)
    if env.spec.task_family == "point_reach":
        grip = -np.ones(env.n)
    else:
        arrive = np.hypot(*(np.clip(env.gripper + motion, 0.0, 1.0) - rec).T) <= 0.5 * env.spec.success_radius
        grip = np.where(env.holding & arrive, -1.0, 1.0)
    return np.concatenate([motion, grip[:, None]], axis=1)


def to_policy_space(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw) / ACTION_SCALE


def to_env_space(normalized: np.ndarray) -> np.ndarray:
    return np.asarray(normalized) * ACTION_SCALE


def chunk_episode(observations: np.ndarray, actions: np.ndarray, chunk_size: int):
    """Slice one episode into non-overlapping chunks.

    ``observations[t]`` is the observation before action ``t``.  The last
    partial chunk is padded by repeating its final action.
    """
    T = len(actions)
    starts = list(range(0, T, chunk_size))
    obs = np.stack([observations[s] for s in starts])
    chunks = []
    for s in starts:
        c = actions[s : s + chunk_size]
        if len(c) < chunk_size:
            c = np.concatenate([c, np.repeat(c[-1:], chunk_size - len(c), axis=0)])
        chunks.append(c)
    return obs, np.stack(chunks)


DEMO_MAGIC = b"FLOWRLDM"
DEMO_VERSION = 1


@dataclass
class DemoSet:
    """``(observation, normalized chunk)`` pairs plus how they were made."""

    obs: np.ndarray  # (N, d_obs)
    chunks: np.ndarray  # (N, H, 3), policy space
    episode_index: np.ndarray  # (N,)
    meta: dict = field(default_factory=dict)

    @property
    def n_episodes(self) -> int:
        return int(self.meta.get("n_episodes", len(np.unique(self.episode_index))))

    def save(self, path) -> None:
        # Layout: magic, u32 version, u32 header length, JSON header, then
        # per record: obs floats then chunk floats (row-major), float64 LE.
        counts = np.bincount(self.episode_index, minlength=self.n_episodes).tolist()
        header = dict(self.meta, d_obs=int(self.obs.shape[1]), chunk_size=int(self.chunks.shape[1]),
                      action_dim=int(self.chunks.shape[2]), n_records=int(len(self.obs)),
                      chunks_per_episode=counts)
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        body = np.concatenate([self.obs, self.chunks.reshape(len(self.chunks), -1)], axis=1)
        with open(path, "wb") as fh:
            fh.write(DEMO_MAGIC)
            fh.write(struct.pack("<II", DEMO_VERSION, len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(body, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "DemoSet":
        raw = Path(path).read_bytes()
        if raw[:8] != DEMO_MAGIC:
            raise ValueError(f"{path}: not a demo file")
        version, n = struct.unpack("<II", raw[8:16])
        if version != DEMO_VERSION:
            raise ValueError(f"{path}: unsupported demo format version {version}")
        header = json.loads(raw[16 : 16 + n].decode("utf-8"))
        d_obs, H, d_a, N = header["d_obs"], header["chunk_size"], header["action_dim"], header["n_records"]
        body = np.frombuffer(raw[16 + n :], dtype="<f8").astype(np.float64)
        if body.size != N * (d_obs + H * d_a):
            raise ValueError(f"{path}: truncated demo records")
        body = body.reshape(N, d_obs + H * d_a)
        counts = header.pop("chunks_per_episode")
        episode_index = np.repeat(np.arange(len(counts)), counts)
        for key in ("d_obs", "chunk_size", "action_dim", "n_records"):
            header.pop(key)
        return cls(body[:, :d_obs].copy(), body[:, d_obs:].reshape(N, H, d_a).copy(), episode_index, header)


def gen_demos(spec: TaskSpec, n_episodes: int, chunk_size: int, seed: int = 0, jitter: float = 0.0) -> DemoSet:
    """Scripted-expert episodes sliced into chunks, in normalized action space."""
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    spec.validate(chunk_size)
    ss = np.random.SeedSequence(seed)
    episode_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_episodes)]
    env = EnvBatch(spec, n_episodes, seed)
    obs = env.reset(seeds=episode_seeds)
    jitter_rng = np.random.default_rng(ss.generate_state(2))
    live = np.ones(n_episodes, dtype=bool)
    obs_log, act_log = [obs], []
    while live.any():
        raw = scripted_expert(env, jitter, jitter_rng)
        raw[:, :2] = np.clip(raw[:, :2], -MAX_MOVE, MAX_MOVE)
        obs, _, done = env.step(raw, live)
        act_log.append(np.where(live[:, None], raw, np.nan))
        obs_log.append(obs)
        live &= ~done
    acts = np.stack(act_log, axis=1)  # (n, T, 3)
    all_obs = np.stack(obs_log, axis=1)
    o_list, c_list, e_list = [], [], []
    successes = 0
    for i in range(n_episodes):
        T = int(np.sum(~np.isnan(acts[i, :, 0])))
        o, c = chunk_episode(all_obs[i, :T], to_policy_space(acts[i, :T]), chunk_size)
        o_list.append(o)
        c_list.append(c)
        e_list.append(np.full(len(o), i))
        successes += bool(env.success[i])
    meta = {"task": asdict(spec), "n_episodes": n_episodes, "seed": seed, "jitter": jitter,
            "episode_seeds": episode_seeds, "expert_successes": successes}
    return DemoSet(np.concatenate(o_list), np.concatenate(c_list), np.concatenate(e_list), meta)
