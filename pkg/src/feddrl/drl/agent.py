"""DDPG agent that turns client reports into aggregation impact factors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from feddrl.fl.core import ClientReport
from feddrl.nn import Network, load_network, save_network, softmax

MODES = ("online", "two_stage")
_AGENT_STREAM = 3


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    rho: float = 0.02
    pi_lr: float = 1e-4
    q_lr: float = 1e-3
    hidden: int = 256
    pi_layers: int = 3
    q_layers: int = 3
    beta: float = 0.5
    workers: int = 2
    batch_size: int = 64
    updates_per_round: int = 5
    noise_start: float = 0.1
    noise_end: float = 0.01
    capacity: int = 100_000
    normalize_state: bool = True
    conventional_polyak: bool = False
    offline_updates: int = 1000
    final_layer_init: float = 3e-3
    worker_rounds: int | None = None
    parallel_workers: bool = False
    mode: str = "two_stage"

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.pi_layers < 1 or self.q_layers < 1 or self.hidden < 1:
            raise ValueError("network sizes must be positive")
        if self.workers < 1 or self.batch_size < 1 or self.capacity < 1:
            raise ValueError("workers, batch_size and capacity must be positive")
        if self.updates_per_round < 0 or self.offline_updates < 0:
            raise ValueError("update counts must be nonnegative")
        if self.final_layer_init < 0:
            raise ValueError("final_layer_init must be nonnegative")
        if self.noise_start < 0 or self.noise_end < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


# --- state -------------------------------------------------------------------------


@dataclass
class AggState:
    losses_before: np.ndarray
    losses_after: np.ndarray
    counts: np.ndarray
    round_index: int = 0

    def __post_init__(self):
        k = len(self.losses_before)
        if len(self.losses_after) != k or len(self.counts) != k:
            raise ValueError("state components differ in length")
        if not np.all(np.isfinite(self.flat())):
            raise ValueError("state has non-finite entries")

    @property
    def k(self) -> int:
        return len(self.losses_before)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.losses_before, self.losses_after, self.counts]).astype(np.float64)


@dataclass
class StateNormalizer:
    """Losses scaled by the largest loss seen so far, counts by their total."""

    enabled: bool = True
    max_loss: float = 0.0

    def __call__(self, lb: np.ndarray, la: np.ndarray, n: np.ndarray):
        if not self.enabled:
            return lb, la, n
        self.max_loss = max(self.max_loss, float(lb.max()), float(la.max()))
        scale = self.max_loss if self.max_loss > 0 else 1.0
        return lb / scale, la / scale, n / n.sum()


def build_state(
    reports: Sequence[ClientReport],
    round_index: int = 0,
    normalizer: StateNormalizer | None = None,
    k: int | None = None,
) -> AggState:
    if k is not None and len(reports) != k:
        raise ValueError(f"expected {k} reports, got {len(reports)}")
    if not reports:
        raise ValueError("no reports")
    lb = np.array([r.loss_before for r in reports], dtype=np.float64)
    la = np.array([r.loss_after for r in reports], dtype=np.float64)
    n = np.array([r.n_samples for r in reports], dtype=np.float64)
    if normalizer is not None:
        lb, la, n = normalizer(lb, la, n)
    return AggState(lb, la, n, round_index)


# --- action ------------------------------------------------------------------------


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass
class AggAction:
    mu: np.ndarray
    sigma: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mu, self.sigma])

    @classmethod
    def from_flat(cls, vec: np.ndarray) -> "AggAction":
        k = len(vec) // 2
        return cls(np.array(vec[:k]), np.array(vec[k:]))


def action_from_head(out: np.ndarray, beta: float, mu_noise: np.ndarray | None = None) -> np.ndarray:
    """Map raw policy outputs ``[mu, sigma_raw]`` (batched on axis 0) to ``[mu, sigma]``."""
    out = np.atleast_2d(out)
    k = out.shape[1] // 2
    mu = out[:, :k].copy()
    if mu_noise is not None:
        mu += mu_noise
    sigma = np.minimum(softplus(out[:, k:]), beta * np.abs(mu))
    return np.concatenate([mu, sigma], axis=1)


def action_head_backward(out: np.ndarray, beta: float, grad_action: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw head given the gradient w.r.t. ``[mu, sigma]``."""
    out = np.atleast_2d(out)
    k = out.shape[1] // 2
    mu, raw = out[:, :k], out[:, k:]
    g_mu, g_sigma = grad_action[:, :k], grad_action[:, k:]
    soft = softplus(raw)
    clamped = soft > beta * np.abs(mu)
    d_raw = np.where(clamped, 0.0, g_sigma * sigmoid(raw))
    d_mu = g_mu + np.where(clamped, g_sigma * beta * np.sign(mu), 0.0)
    return np.concatenate([d_mu, d_raw], axis=1)


def select_action(
    policy: Network,
    state: AggState | np.ndarray,
    beta: float,
    explore: bool = False,
    noise_scale: float = 0.0,
    rng: np.random.Generator | None = None,
) -> AggAction:
    s = state.flat() if isinstance(state, AggState) else np.asarray(state, dtype=np.float64)
    out = policy.forward(s)
    k = out.size // 2
    noise = None
    if explore and noise_scale > 0:
        if rng is None:
            raise ValueError("exploration needs an rng")
        noise = rng.normal(0.0, noise_scale, size=k)
    return AggAction.from_flat(action_from_head(out, beta, noise)[0])


def impacts_from_action(action: AggAction, rng: np.random.Generator) -> np.ndarray:
    x = rng.normal(action.mu, action.sigma)
    z = x - x.max()
    # floor keeps every weight strictly positive even for extreme logits
    return softmax(np.maximum(z, -700.0))


# --- reward / priority ----------------------------------------------------------------


def compute_reward(losses_before_next) -> float:
    l = np.asarray(losses_before_next, dtype=np.float64)
    if l.size == 0:
        raise ValueError("no losses")
    return -float(l.mean() + (l.max() - l.min()))


def q_value(q: Network, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return q.forward(np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1))[:, 0]


def td_priority(s, a, r, s_next, q: Network, gamma: float) -> np.ndarray | float:
    """``|r + gamma Q(s', a) - Q(s, a)|``; vectorised over leading axis."""
    single = np.ndim(r) == 0
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    td = r + gamma * q_value(q, s_next, a) - q_value(q, s, a)
    out = np.abs(td)
    return float(out[0]) if single else out


# --- replay -------------------------------------------------------------------------


class ReplayBuffer:
    """Bounded experience store; the oldest entry is evicted when full."""

    _FIELDS = ("s", "a", "r", "s_next", "priority", "seq")

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 100_000):
        self.state_dim, self.action_dim, self.capacity = state_dim, action_dim, capacity
        self._size = 0
        self._next_seq = 0
        self._alloc(min(capacity, 256))

    def _alloc(self, rows: int) -> None:
        old = {f: getattr(self, "_" + f, None) for f in self._FIELDS}
        self._s = np.zeros((rows, self.state_dim))
        self._a = np.zeros((rows, self.action_dim))
        self._r = np.zeros(rows)
        self._s_next = np.zeros((rows, self.state_dim))
        self._priority = np.zeros(rows)
        self._seq = np.zeros(rows, dtype=np.int64)
        if old["s"] is not None:
            for f in self._FIELDS:
                getattr(self, "_" + f)[: self._size] = old[f][: self._size]

    s = property(lambda self: self._s[: self._size])
    a = property(lambda self: self._a[: self._size])
    r = property(lambda self: self._r[: self._size])
    s_next = property(lambda self: self._s_next[: self._size])
    priority = property(lambda self: self._priority[: self._size])
    seq = property(lambda self: self._seq[: self._size])

    def __len__(self) -> int:
        return self._size

    def add(self, s, a, r, s_next, priority: float = 0.0) -> None:
        s, a, s_next = (np.asarray(v, dtype=np.float64) for v in (s, a, s_next))
        if s.shape != (self.state_dim,) or s_next.shape != (self.state_dim,) or a.shape != (self.action_dim,):
            raise ValueError("experience dimensions do not match the buffer")
        if self._size >= self.capacity:
            i = int(np.argmin(self.seq))
        else:
            if self._size == len(self._r):
                self._alloc(min(self.capacity, 2 * len(self._r)))
            i = self._size
            self._size += 1
        self._s[i], self._a[i], self._r[i], self._s_next[i] = s, a, float(r), s_next
        self._priority[i], self._seq[i] = priority, self._next_seq
        self._next_seq += 1

    def _take(self, order: np.ndarray) -> None:
        for f in self._FIELDS:
            arr = getattr(self, "_" + f)
            arr[: self._size] = arr[: self._size][order]

    def reprioritize(self, q: Network, gamma: float) -> None:
        if len(self):
            self._priority[: self._size] = td_priority(self.s, self.a, self.r, self.s_next, q, gamma)

    def sort_by_priority(self) -> None:
        # stable on ties: older experience first
        self._take(np.lexsort((self.seq, -self.priority)))

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Rank-biased draw (P proportional to 1/rank) over the current order."""
        n = len(self)
        if n < batch_size:
            raise ValueError(f"buffer holds {n} experiences, batch needs {batch_size}")
        p = 1.0 / np.arange(1, n + 1)
        return rng.choice(n, size=batch_size, replace=False, p=p / p.sum())

    def merged(self, *others: "ReplayBuffer") -> "ReplayBuffer":
        out = ReplayBuffer(self.state_dim, self.action_dim, self.capacity)
        for buf in (self, *others):
            order = np.argsort(buf.seq, kind="stable")
            for i in order:
                out.add(buf.s[i], buf.a[i], buf.r[i], buf.s_next[i], buf.priority[i])
        return out

    def to_bytes(self) -> bytes:
        header = (
            "feddrl-replay 1\n"
            f"state_dim {self.state_dim}\naction_dim {self.action_dim}\n"
            f"capacity {self.capacity}\nrecords {len(self)}\nend\n"
        )
        order = np.argsort(self.seq, kind="stable")
        block = np.concatenate(
            [self.s[order], self.a[order], self.r[order, None], self.s_next[order], self.priority[order, None]],
            axis=1,
        )
        return header.encode("ascii") + block.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ReplayBuffer":
        head, sep, block = raw.partition(b"end\n")
        if not sep or not head.startswith(b"feddrl-replay 1\n"):
            raise ValueError("not a replay buffer export")
        meta = dict(line.split(" ", 1) for line in head.decode("ascii").splitlines()[1:])
        sd, ad, cap, n = (int(meta[k]) for k in ("state_dim", "action_dim", "capacity", "records"))
        width = 2 * sd + ad + 2
        rows = np.frombuffer(block, dtype="<f8")
        if rows.size != n * width:
            raise ValueError("replay export is truncated")
        rows = rows.reshape(n, width)
        buf = cls(sd, ad, cap)
        for row in rows:
            buf.add(row[:sd], row[sd : sd + ad], row[sd + ad], row[sd + ad + 1 : 2 * sd + ad + 1], row[-1])
        return buf


# --- agent ------------------------------------------------------------------------------


def _dense_stack(n_in: int, n_out: int, hidden: int, layers: int, rng, final_scale: float = 0.0) -> Network:
    """LeakyReLU MLP; a positive ``final_scale`` redraws the output layer from
    U(-final_scale, final_scale) so initial outputs sit near zero."""
    sizes = [n_in] + [hidden] * (layers - 1) + [n_out]
    net = Network.mlp(sizes, "leaky_relu", rng=rng)
    if final_scale > 0:
        for view in net.layers[-1]._params:
            view[...] = rng.uniform(-final_scale, final_scale, size=view.shape)
    return net


def soft_update(target: Network, main: Network, rho: float, conventional: bool = False) -> None:
    """``target <- rho*target + (1-rho)*main``; the conventional form swaps the roles of rho."""
    keep = 1.0 - rho if conventional else rho
    target.params *= keep
    target.params += (1.0 - keep) * main.params


class DrlAgent:
    """Policy/value networks, their targets, and a replay buffer for K clients."""

    def __init__(self, k: int, cfg: AgentConfig = AgentConfig(), seed: int = 0):
        self.k, self.cfg = k, cfg
        self.state_dim, self.action_dim = 3 * k, 2 * k
        init = np.random.default_rng([seed, _AGENT_STREAM, 1])
        scale = cfg.final_layer_init
        self.pi = _dense_stack(self.state_dim, self.action_dim, cfg.hidden, cfg.pi_layers, init, scale)
        self.q = _dense_stack(self.state_dim + self.action_dim, 1, cfg.hidden, cfg.q_layers, init, scale)
        self.pi_target = self.pi.clone()
        self.q_target = self.q.clone()
        self.buffer = ReplayBuffer(self.state_dim, self.action_dim, cfg.capacity)
        self.normalizer = StateNormalizer(cfg.normalize_state)
        self.rng = np.random.default_rng([seed, _AGENT_STREAM, 2])
        self.updates = 0

    def copy(self, seed: int | None = None) -> "DrlAgent":
        """Same networks and buffer; a fresh rng stream when ``seed`` is given."""
        twin = DrlAgent.__new__(DrlAgent)
        twin.k, twin.cfg = self.k, self.cfg
        twin.state_dim, twin.action_dim = self.state_dim, self.action_dim
        for name in ("pi", "q", "pi_target", "q_target"):
            net = getattr(self, name)
            c = net.clone()
            setattr(twin, name, c)
        twin.buffer = self.buffer.merged()
        twin.normalizer = StateNormalizer(self.normalizer.enabled, self.normalizer.max_loss)
        twin.rng = np.random.default_rng([seed, _AGENT_STREAM, 2]) if seed is not None else np.random.default_rng()
        if seed is None:
            twin.rng.bit_generator.state = self.rng.bit_generator.state
        twin.updates = self.updates
        return twin

    def act(self, state: AggState, explore: bool, noise_scale: float) -> AggAction:
        return select_action(self.pi, state, self.cfg.beta, explore, noise_scale, self.rng)

    def remember(self, s: np.ndarray, a: np.ndarray, r: float, s_next: np.ndarray) -> None:
        prio = td_priority(s, a, r, s_next, self.q, self.cfg.gamma)
        self.buffer.add(s, a, r, s_next, prio)

    def ready(self) -> bool:
        return len(self.buffer) >= self.cfg.batch_size

    def update(self, b: int) -> dict:
        return ddpg_update(self, self.buffer, b)

    def networks(self) -> dict[str, Network]:
        return {"pi": self.pi, "q": self.q, "pi_target": self.pi_target, "q_target": self.q_target}

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, net in self.networks().items():
            save_network(directory / f"{name}.ckpt", net)
        meta = {"k": self.k, "config": asdict(self.cfg), "max_loss": self.normalizer.max_loss, "updates": self.updates}
        (directory / "agent.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        (directory / "replay.bin").write_bytes(self.buffer.to_bytes())

    @classmethod
    def load(cls, directory: str | Path, seed: int = 0) -> "DrlAgent":
        directory = Path(directory)
        meta = json.loads((directory / "agent.json").read_text())
        cfg = AgentConfig(**meta["config"])
        agent = cls(meta["k"], cfg, seed)
        for name in agent.networks():
            setattr(agent, name, load_network(directory / f"{name}.ckpt"))
        agent.normalizer.max_loss = meta["max_loss"]
        agent.updates = meta["updates"]
        replay = directory / "replay.bin"
        if replay.exists():
            agent.buffer = ReplayBuffer.from_bytes(replay.read_bytes())
        return agent


def value_targets(agent: DrlAgent, r: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    """``y = r + gamma * Q'(s', pi'(s'))``."""
    a2 = action_from_head(agent.pi_target.forward(s_next), agent.cfg.beta)
    return r + agent.cfg.gamma * q_value(agent.q_target, s_next, a2)


def value_loss_grad(q: Network, s: np.ndarray, a: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared TD error and its gradient w.r.t. the value-net parameters."""
    err = q_value(q, s, a) - y
    q._backward((2.0 / len(y) * err)[:, None])
    return float(np.mean(err**2)), q.grads.copy()


def policy_objective_grad(pi: Network, q: Network, s: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Mean ``Q(s, pi(s))`` and its gradient w.r.t. the policy parameters."""
    n, state_dim = len(s), s.shape[1]
    head = pi.forward(s)
    qv = q_value(q, s, action_from_head(head, beta))
    q._backward(np.full((n, 1), 1.0 / n))
    g_act = q.input_grad[:, state_dim:]
    pi._backward(action_head_backward(head, beta, g_act))
    return float(qv.mean()), pi.grads.copy()


def ddpg_update(agent: DrlAgent, buffer: ReplayBuffer, b: int) -> dict:
    """Prioritise, sort, then ``b`` rounds of value descent / policy ascent / soft updates."""
    cfg = agent.cfg
    if len(buffer) == 0 or len(buffer) < cfg.batch_size:
        raise ValueError(f"buffer holds {len(buffer)} experiences, need {cfg.batch_size}")
    buffer.reprioritize(agent.q, cfg.gamma)
    buffer.sort_by_priority()
    stats = {"q_loss": [], "pi_objective": [], "batches": []}
    for _ in range(b):
        idx = buffer.sample_indices(cfg.batch_size, agent.rng)
        s, a, r, s2 = buffer.s[idx], buffer.a[idx], buffer.r[idx], buffer.s_next[idx]

        y = value_targets(agent, r, s2)
        q_loss, q_grad = value_loss_grad(agent.q, s, a, y)
        agent.q.params -= cfg.q_lr * q_grad

        objective, pi_grad = policy_objective_grad(agent.pi, agent.q, s, cfg.beta)
        agent.pi.params += cfg.pi_lr * pi_grad

        soft_update(agent.q_target, agent.q, cfg.rho, cfg.conventional_polyak)
        soft_update(agent.pi_target, agent.pi, cfg.rho, cfg.conventional_polyak)
        stats["q_loss"].append(q_loss)
        stats["pi_objective"].append(objective)
        stats["batches"].append(idx)
        agent.updates += 1
    return stats
