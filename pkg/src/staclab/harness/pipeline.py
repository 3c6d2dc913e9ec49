"""Actors, learner, and the deterministic and threaded drivers."""

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from staclab import agent as agent_mod
from staclab.harness.envs import EnvFault
from staclab.harness.queue import QueueClosed, TrajectoryQueue
from staclab.harness.tlog import TrajectoryLog
from staclab.vtrace import Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HarnessConfig:
    unroll: int = 20
    batch_size: int = 32  # trajectories per learner step
    envs_per_actor: int = 32
    num_actors: int = 1
    queue_capacity: int = 4
    refresh: str = "trajectory"  # or "step" / "never"
    deterministic: bool = True
    seed: int = 0
    trajectory_log: str = None

    def __post_init__(self):
        if self.refresh not in ("trajectory", "step", "never"):
            raise ValueError(f"unknown refresh policy {self.refresh!r}")
        if self.batch_size % self.envs_per_actor:
            raise ValueError("batch_size must be a multiple of envs_per_actor")
        if self.queue_capacity < 1 or self.unroll < 2 or self.num_actors < 1:
            raise ValueError("need queue_capacity >= 1, unroll >= 2, num_actors >= 1")

    @property
    def items_per_batch(self):
        return self.batch_size // self.envs_per_actor


class SnapshotBoard:
    """Latest published parameters; optionally keeps every version for replay checks."""

    def __init__(self, snapshot, keep_history=False):
        self._lock = threading.Lock()
        self._latest = snapshot
        self._history = {snapshot.version: snapshot} if keep_history else None

    def publish(self, snapshot):
        with self._lock:
            if snapshot.version <= self._latest.version:
                raise ValueError(f"snapshot version {snapshot.version} does not increase")
            self._latest = snapshot
            if self._history is not None:
                self._history[snapshot.version] = snapshot

    def latest(self):
        with self._lock:
            return self._latest

    def version(self, v):
        if self._history is None:
            raise LookupError("snapshot history not kept")
        with self._lock:
            return self._history[v]


class EpisodeStats:
    """Thread-safe record of finished episode returns."""

    def __init__(self, window=100):
        self._lock = threading.Lock()
        self.recent = deque(maxlen=window)
        self.count = 0

    def add(self, returns):
        with self._lock:
            self.recent.extend(returns)
            self.count += len(returns)

    def summary(self):
        with self._lock:
            if not self.recent:
                return {"episodes": self.count, "return_mean": float("nan"), "return_std": float("nan")}
            r = np.array(self.recent)
            return {"episodes": self.count, "return_mean": float(r.mean()), "return_std": float(r.std())}


class Actor:
    """Runs a batched environment under head-0 snapshots and emits fixed-length trajectories."""

    def __init__(self, env, board, queue, agent_cfg, harness_cfg, actor_id=0, stats=None):
        self.env = env
        self.board = board
        self.queue = queue
        self.cfg = agent_cfg
        self.hcfg = harness_cfg
        self.actor_id = actor_id
        self.stats = stats if stats is not None else EpisodeStats()
        base = harness_cfg.seed * 1_000_003 + actor_id * 10_007
        self.rng = np.random.default_rng(base)
        self._slot_seeds = base + np.arange(harness_cfg.envs_per_actor)
        self._reset_count = 0
        self.obs = env.reset(self._slot_seeds)
        self.returns = np.zeros(harness_cfg.envs_per_actor)
        self.faults = 0
        self.snapshot = board.latest()

    def _reset_all(self):
        self._reset_count += 1
        seeds = self._slot_seeds + 7919 * self._reset_count
        self.obs = self.env.reset(seeds)
        self.returns[:] = 0.0

    def unroll(self):
        """Produce one trajectory batch ``[n, envs_per_actor]``; returns it or None on fault."""
        n, k = self.hcfg.unroll, self.hcfg.envs_per_actor
        if self.hcfg.refresh != "never":
            self.snapshot = self.board.latest()
        snap = self.snapshot
        obs = np.empty((n + 1, k, self.env.observation_dim))
        actions, logp = [], np.empty((n, k))
        rewards, dones = np.empty((n, k)), np.empty((n, k))
        step_versions = np.empty(n, dtype=np.int64)
        obs[0] = self.obs
        for t in range(n):
            if self.hcfg.refresh == "step" and t > 0:
                snap = self.board.latest()
            step_versions[t] = snap.version
            a, lp = agent_mod.act(snap, obs[t], self.cfg, self.rng)
            env_action = np.tanh(a) if self.cfg.continuous else a
            try:
                o, r, d = self.env.step(env_action)
            except EnvFault as err:
                self.faults += 1
                log.warning("actor %d: environment fault (%s); batch discarded", self.actor_id, err)
                self._reset_all()
                return None
            actions.append(a)
            logp[t] = lp
            rewards[t], dones[t], obs[t + 1] = r, d, o
            self.returns += r
            if d.any():
                finished = np.flatnonzero(d)
                self.stats.add(self.returns[finished].tolist())
                self.returns[finished] = 0.0
        self.obs = obs[n]
        versions = np.full(k, step_versions.min(), dtype=np.int64)
        return Trajectory(
            observations=obs,
            actions=np.stack(actions),
            rewards=rewards,
            behavior_logp=logp,
            dones=dones,
            versions=versions,
            meta={"actor": self.actor_id, "step_versions": step_versions},
        )

    def produce(self):
        """Reserve a queue slot, unroll, and enqueue; returns False if the batch was discarded."""
        ticket = self.queue.reserve()
        traj = self.unroll()
        if traj is None:
            self.queue.cancel(ticket)
            return False
        self.queue.put(ticket, traj)
        return True


@dataclass
class LearnerRecord:
    version: int
    staleness: np.ndarray
    diagnostics: dict
    env_steps: int


class Learner:
    """Consumes ``batch_size`` trajectories per step and publishes new snapshots."""

    def __init__(self, agent, queue, board, harness_cfg, traj_log=None):
        self.agent = agent
        self.queue = queue
        self.board = board
        self.hcfg = harness_cfg
        self.env_steps = 0
        self.trajectories = 0
        self.traj_log = traj_log
        self.staleness_max = 0

    def step(self, timeout=None):
        parts = [self.queue.get(timeout) for _ in range(self.hcfg.items_per_batch)]
        batch = parts[0] if len(parts) == 1 else Trajectory.concat(parts)
        if self.traj_log is not None:
            self.traj_log.write(batch)
        staleness = self.agent.version - batch.versions
        if np.any(staleness < 0):
            raise RuntimeError("trajectory produced by a future parameter version")
        self.staleness_max = max(self.staleness_max, int(staleness.max()))
        diag = self.agent.step(batch)
        self.board.publish(self.agent.snapshot())
        self.trajectories += batch.batch_size
        self.env_steps += batch.batch_size * batch.length
        return LearnerRecord(self.agent.version, staleness, diag, self.env_steps)


@dataclass
class RunResult:
    records: list
    env_steps: int
    faults: int
    produced: int
    consumed: int
    discarded: int
    in_queue: int
    stats: EpisodeStats
    wall_time: float
    board: SnapshotBoard = None
    extra: dict = field(default_factory=dict)


def _make_log(hcfg):
    return TrajectoryLog(hcfg.trajectory_log, "wb") if hcfg.trajectory_log else None


def run_deterministic(agent, env_factory, hcfg, total_steps, callback=None, keep_history=False, lead=0):
    """Single-threaded fixed schedule: actors fill one batch, the learner consumes it.

    ``lead`` extra batches are produced up front, so data is exactly
    ``lead`` learner versions stale (bounded by the queue capacity).
    """
    start = time.perf_counter()
    queue = TrajectoryQueue(max(hcfg.queue_capacity, (lead + 1) * hcfg.items_per_batch))
    board = SnapshotBoard(agent.snapshot(), keep_history)
    stats = EpisodeStats()
    actors = [
        Actor(env_factory(), board, queue, agent.cfg, hcfg, i, stats) for i in range(hcfg.num_actors)
    ]
    traj_log = _make_log(hcfg)
    learner = Learner(agent, queue, board, hcfg, traj_log)
    records = []
    turn = 0

    def fill():
        nonlocal turn
        produced = 0
        while produced < hcfg.items_per_batch:
            if actors[turn % len(actors)].produce():
                produced += 1
            turn += 1

    try:
        for _ in range(lead):
            fill()
        while learner.env_steps < total_steps:
            fill()
            rec = learner.step()
            records.append(rec)
            if callback is not None and callback(rec, stats) is False:
                break
    finally:
        if traj_log is not None:
            traj_log.close()
    return RunResult(
        records,
        learner.env_steps,
        sum(a.faults for a in actors),
        queue.produced,
        queue.consumed,
        queue.discarded,
        queue.pending(),
        stats,
        time.perf_counter() - start,
        board,
    )


def run_threaded(agent, env_factory, hcfg, total_steps, callback=None, keep_history=False, timeout=60.0):
    """Free-running actor threads feeding one learner (the calling thread)."""
    start = time.perf_counter()
    queue = TrajectoryQueue(hcfg.queue_capacity)
    board = SnapshotBoard(agent.snapshot(), keep_history)
    stats = EpisodeStats()
    actors = [
        Actor(env_factory(), board, queue, agent.cfg, hcfg, i, stats) for i in range(hcfg.num_actors)
    ]
    errors = []

    def actor_main(actor):
        try:
            while True:
                actor.produce()
        except QueueClosed:
            pass
        except BaseException as err:  # surfaced on the learner thread
            errors.append(err)
            queue.close()

    threads = [threading.Thread(target=actor_main, args=(a,), daemon=True) for a in actors]
    for t in threads:
        t.start()
    traj_log = _make_log(hcfg)
    learner = Learner(agent, queue, board, hcfg, traj_log)
    records = []
    try:
        while learner.env_steps < total_steps:
            try:
                rec = learner.step(timeout)
            except QueueClosed:
                break
            records.append(rec)
            if callback is not None and callback(rec, stats) is False:
                break
    finally:
        queue.close()
        for t in threads:
            t.join(timeout)
        if traj_log is not None:
            traj_log.close()
    if errors:
        raise errors[0]
    return RunResult(
        records,
        learner.env_steps,
        sum(a.faults for a in actors),
        queue.produced,
        queue.consumed,
        queue.discarded,
        queue.pending(),
        stats,
        time.perf_counter() - start,
        board,
    )


def run(agent, env_factory, hcfg, total_steps, callback=None, keep_history=False):
    driver = run_deterministic if hcfg.deterministic else run_threaded
    return driver(agent, env_factory, hcfg, total_steps, callback=callback, keep_history=keep_history)
