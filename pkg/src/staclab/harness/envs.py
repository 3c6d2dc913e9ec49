"""Batched desk-scale environments with optimal-performance oracles.

Every environment steps ``m`` independent slots at once. A slot whose
episode ends is reset on the same call: the returned observation is the
first observation of the next episode and ``done`` is 1 for that slot.
"""

from dataclasses import dataclass

import numpy as np

from staclab.tabular import PolicyTable, TabularMDP


class EnvFault(RuntimeError):
    """An environment slot failed; ``slots`` lists the affected indices (None = all)."""

    def __init__(self, message, slots=None):
        super().__init__(message)
        self.slots = slots


@dataclass(frozen=True)
class DiscreteSpace:
    n: int


@dataclass(frozen=True)
class BoxSpace:
    shape: tuple
    low: float = -1.0
    high: float = 1.0


class BatchedEnv:
    """Interface: ``reset(seeds) -> obs``, ``step(actions) -> (obs, rewards, dones)``."""

    observation_dim: int
    action_space: object

    @property
    def continuous(self):
        return isinstance(self.action_space, BoxSpace)

    @property
    def num_slots(self):
        return self._m

    def reset(self, seeds):
        raise NotImplementedError

    def step(self, actions):
        raise NotImplementedError


class _TabularEnv(BatchedEnv):
    """Shared machinery for finite MDPs with one-hot observations."""

    def __init__(self, num_states, num_actions, max_steps):
        self.num_states = num_states
        self.observation_dim = num_states
        self.action_space = DiscreteSpace(num_actions)
        self.max_steps = max_steps
        self._m = 0

    def _obs(self):
        out = np.zeros((self._m, self.num_states))
        out[np.arange(self._m), self._state] = 1.0
        return out

    def _start_state(self, slot):
        return 0

    def reset(self, seeds):
        self._rngs = [np.random.default_rng(s) for s in seeds]
        self._m = len(seeds)
        self._state = np.array([self._start_state(i) for i in range(self._m)], dtype=np.int64)
        self._t = np.zeros(self._m, dtype=np.int64)
        return self._obs()

    def _transition(self, slot, state, action):
        """Return ``(next_state, reward, terminal)`` for one slot."""
        raise NotImplementedError

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self._m,) or np.any((actions < 0) | (actions >= self.action_space.n)):
            raise ValueError(f"invalid action batch {actions!r}")
        rewards = np.zeros(self._m)
        dones = np.zeros(self._m)
        for i in range(self._m):
            nxt, r, term = self._transition(i, self._state[i], actions[i])
            self._t[i] += 1
            rewards[i] = r
            if term or self._t[i] >= self.max_steps:
                dones[i] = 1.0
                nxt = self._start_state(i)
                self._t[i] = 0
            self._state[i] = nxt
        return self._obs(), rewards, dones

    def tabular(self, gamma):
        """This environment as a :class:`TabularMDP` (terminal states absorb with reward 0)."""
        raise NotImplementedError

    def start_distribution(self):
        d = np.zeros(self.num_states)
        d[0] = 1.0
        return d


def value_iteration(mdp, tol=1e-12, max_iter=100_000):
    """Optimal values and a greedy deterministic policy."""
    v = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        q = mdp.rewards + mdp.gamma * mdp.transitions @ v
        new = q.max(-1)
        if np.abs(new - v).max() < tol:
            v = new
            break
        v = new
    q = mdp.rewards + mdp.gamma * mdp.transitions @ v
    greedy = np.zeros_like(q)
    greedy[np.arange(mdp.num_states), q.argmax(-1)] = 1.0
    return v, PolicyTable(greedy)


class ChainMDP(_TabularEnv):
    """Positions ``0..L``; action 1 moves right, 0 moves left (clamped at 0).

    With probability ``slip`` the opposite move happens. Reaching ``L``
    pays ``goal_reward`` and ends the episode, so from the start the best
    discounted return is ``gamma^(L-1) * goal_reward`` when ``slip = 0``.
    """

    def __init__(self, length=5, slip=0.0, goal_reward=1.0, max_steps=None):
        if length < 1 or not 0.0 <= slip < 1.0:
            raise ValueError("need length >= 1 and slip in [0, 1)")
        super().__init__(length + 1, 2, max_steps or 4 * length)
        self.length = length
        self.slip = slip
        self.goal_reward = goal_reward

    def _transition(self, slot, state, action):
        move = 1 if action == 1 else -1
        if self.slip and self._rngs[slot].random() < self.slip:
            move = -move
        nxt = min(max(state + move, 0), self.length)
        if nxt == self.length:
            return nxt, self.goal_reward, True
        return nxt, 0.0, False

    def tabular(self, gamma):
        S = self.num_states
        P = np.zeros((S, 2, S))
        r = np.zeros((S, 2))
        for x in range(self.length):
            for a, move in ((0, -1), (1, 1)):
                for m, p in ((move, 1 - self.slip), (-move, self.slip)):
                    y = min(max(x + m, 0), self.length)
                    P[x, a, y] += p
                    if y == self.length:
                        r[x, a] += p * self.goal_reward
        P[self.length, :, self.length] = 1.0
        return TabularMDP(P, r, gamma)

    def optimal_return_closed_form(self, gamma):
        if self.slip != 0.0:
            raise ValueError("closed form only for the deterministic chain")
        return gamma ** (self.length - 1) * self.goal_reward


class GridWorld(_TabularEnv):
    """``W x H`` grid, start in one corner, goal in the opposite corner.

    Each step costs ``step_cost``; entering the goal pays ``goal_reward``
    on top and ends the episode. Episodes are capped at ``max_steps``.
    Actions: 0 up, 1 right, 2 down, 3 left; moves into walls stay put.
    """

    MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))

    def __init__(self, width=5, height=5, goal_reward=1.0, step_cost=0.01, max_steps=50):
        super().__init__(width * height, 4, max_steps)
        self.width, self.height = width, height
        self.goal_reward = goal_reward
        self.step_cost = step_cost
        self.goal = width * height - 1

    def _move(self, state, action):
        x, y = state % self.width, state // self.width
        dx, dy = self.MOVES[action]
        x = min(max(x + dx, 0), self.width - 1)
        y = min(max(y + dy, 0), self.height - 1)
        return y * self.width + x

    def _transition(self, slot, state, action):
        nxt = self._move(state, action)
        if nxt == self.goal:
            return nxt, self.goal_reward - self.step_cost, True
        return nxt, -self.step_cost, False

    def tabular(self, gamma):
        S = self.num_states
        P = np.zeros((S, 4, S))
        r = np.zeros((S, 4))
        for s in range(S):
            for a in range(4):
                if s == self.goal:
                    P[s, a, s] = 1.0
                    continue
                y = self._move(s, a)
                P[s, a, y] = 1.0
                r[s, a] = -self.step_cost + (self.goal_reward if y == self.goal else 0.0)
        return TabularMDP(P, r, gamma)

    def shortest_path(self):
        return (self.width - 1) + (self.height - 1)

    def optimal_return(self, gamma=0.99):
        """Undiscounted episode return of the value-iteration greedy policy."""
        _, greedy = value_iteration(self.tabular(gamma))
        action = greedy.probs.argmax(-1)
        s, ret = 0, 0.0
        for _ in range(self.max_steps):
            s2 = self._move(s, action[s])
            ret += -self.step_cost + (self.goal_reward if s2 == self.goal else 0.0)
            s = s2
            if s == self.goal:
                break
        return ret


class RandomMDP(_TabularEnv):
    """Dirichlet(1) transitions, rewards uniform in [-1, 1], fixed-length episodes."""

    def __init__(self, num_states=8, num_actions=3, seed=0, max_steps=50):
        super().__init__(num_states, num_actions, max_steps)
        rng = np.random.default_rng(seed)
        self.transitions = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
        self.rewards = rng.uniform(-1.0, 1.0, (num_states, num_actions))
        self._cdf = np.cumsum(self.transitions, -1)

    def _transition(self, slot, state, action):
        u = self._rngs[slot].random()
        nxt = int(np.searchsorted(self._cdf[state, action], u, side="right"))
        return min(nxt, self.num_states - 1), self.rewards[state, action], False

    def tabular(self, gamma):
        return TabularMDP(self.transitions, self.rewards, gamma)


class PointMass(BatchedEnv):
    """Single integrator ``x' = x + dt * bound * u`` with ``u`` in [-1, 1]^d.

    Reward is ``-(q |x|^2 + r |u|^2)`` per step; episodes last ``horizon``
    steps from a start drawn uniformly in [-1, 1]^d.
    """

    def __init__(self, dims=1, action_bound=1.0, dt=0.1, q=1.0, r=0.1, horizon=50):
        if dims not in (1, 2):
            raise ValueError("PointMass supports 1 or 2 dimensions")
        self.dims = dims
        self.action_bound = action_bound
        self.dt, self.q, self.r = dt, q, r
        self.horizon = horizon
        self.observation_dim = dims
        self.action_space = BoxSpace((dims,))
        self._m = 0

    def reset(self, seeds):
        self._rngs = [np.random.default_rng(s) for s in seeds]
        self._m = len(seeds)
        self._x = np.stack([g.uniform(-1.0, 1.0, self.dims) for g in self._rngs])
        self._t = np.zeros(self._m, dtype=np.int64)
        return self._x.copy()

    def step(self, actions):
        u = np.asarray(actions, dtype=np.float64).reshape(self._m, self.dims)
        if np.any(np.abs(u) > 1.0):
            raise ValueError("actions must lie in [-1, 1]")
        rewards = -(self.q * (self._x**2).sum(-1) + self.r * (u**2).sum(-1))
        self._x = self._x + self.dt * self.action_bound * u
        self._t += 1
        dones = (self._t >= self.horizon).astype(np.float64)
        for i in np.flatnonzero(dones):
            self._x[i] = self._rngs[i].uniform(-1.0, 1.0, self.dims)
            self._t[i] = 0
        return self._x.copy(), rewards, dones

    def lqr_cost(self, x0):
        """Minimum finite-horizon cost from ``x0`` ignoring the action box.

        Backward Riccati recursion for the scalar system (dimensions are
        independent): ``p_H = 0``, ``p_t = q + p' - (p' b)^2 / (r + b^2 p')``.
        A lower bound on the cost achievable with actions in [-1, 1].
        """
        b = self.dt * self.action_bound
        p = 0.0
        for _ in range(self.horizon):
            p = self.q + p - (p * b) ** 2 / (self.r + b * b * p)
        return float(p * np.sum(np.asarray(x0, dtype=np.float64) ** 2))

    def rollout_cost(self, x0, policy):
        """Cost of a deterministic feedback ``policy(x, t) -> u`` from ``x0``, clipped to the box."""
        x = np.asarray(x0, dtype=np.float64).copy()
        cost = 0.0
        for t in range(self.horizon):
            u = np.clip(policy(x, t), -1.0, 1.0)
            cost += self.q * float(x @ x) + self.r * float(u @ u)
            x = x + self.dt * self.action_bound * u
        return cost

    def lqr_gains(self):
        b = self.dt * self.action_bound
        p, gains = 0.0, []
        for _ in range(self.horizon):
            k = p * b / (self.r + b * b * p)
            gains.append(k)
            p = self.q + p - (p * b) ** 2 / (self.r + b * b * p)
        return gains[::-1]


def make_env(spec):
    """Build an environment from a dict like ``{"name": "gridworld", "width": 5}``."""
    spec = dict(spec)
    name = spec.pop("name").lower()
    table = {"chain": ChainMDP, "gridworld": GridWorld, "random": RandomMDP, "pointmass": PointMass}
    if name not in table:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(table)}")
    return table[name](**spec)


__all__ = [
    "BatchedEnv",
    "BoxSpace",
    "ChainMDP",
    "DiscreteSpace",
    "EnvFault",
    "GridWorld",
    "PointMass",
    "RandomMDP",
    "make_env",
    "value_iteration",
]
