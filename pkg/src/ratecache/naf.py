"""Continuous Q-learning agent with a quadratic advantage head.

The Q-function splits into a state value V(s) and an advantage
A(s, a) = -0.5 * P(s) * (a - mu(s))^2 with P(s) = L(s)^2, so the greedy
action is the analytic vertex mu(s) and no action-space search is ever
needed. Actions live on the unit interval and are mapped affinely to the
environment's bitrate range. mu and L use sigmoid heads, which pins
mu(s) into (0, 1) and P(s) into (0, 1); with unit-interval actions the
advantage is therefore bounded in (-1/2, 0].
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .env import RewardBreakdown, SystemState

NET_NAMES = ("mu", "v", "l")


@dataclass
class Transition:
    """One replay record; the unit of all learning.

    ``snapshot`` keeps the full pre-step environment state so replay
    augmentation can re-simulate from it. ``reward_value`` overrides the
    learning signal (used by the reward-lifting pretrain phase); when
    None the weighted QoE total is used.
    """

    observation: np.ndarray
    action_unit: float
    reward_components: RewardBreakdown
    next_observation: np.ndarray
    terminal: bool = False
    snapshot: Optional[SystemState] = None
    reward_value: Optional[float] = None

    @property
    def scalar_reward(self) -> float:
        if self.reward_value is not None:
            return self.reward_value
        return self.reward_components.weighted_total


class ReplayBuffer:
    """Fixed-capacity ring with strictly FIFO eviction and uniform sampling."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
            self._next = (self._next + 1) % self.capacity

    def sample(self, rng: np.random.Generator, k: int) -> list:
        if k > len(self._items):
            raise ValueError(f"cannot sample {k} from buffer of {len(self._items)}")
        idx = rng.choice(len(self._items), size=k, replace=False)
        return [self._items[i] for i in idx]

    def items_in_order(self) -> list:
        """Oldest to newest; mainly for tests and audits."""
        return self._items[self._next:] + self._items[:self._next]


class NafAgent:
    """Three dense heads (mu, V, L) plus target copies and per-net Adam."""

    def __init__(self, obs_dim: int, hidden=(128, 64, 32),
                 learning_rate: float = 1e-3, target_rate: float = 0.005,
                 grad_clip: float = 10.0, rng=None):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        dims = (obs_dim, *hidden, 1)
        self.obs_dim = obs_dim
        self.hidden = tuple(hidden)
        self.learning_rate = learning_rate
        self.target_rate = target_rate
        self.grad_clip = grad_clip
        self.nets = {
            "mu": nn.init_params(dims, rng, "sigmoid"),
            "v": nn.init_params(dims, rng, "identity"),
            "l": nn.init_params(dims, rng, "sigmoid"),
        }
        self.targets = {"v": self.nets["v"].clone(), "l": self.nets["l"].clone()}
        self.adam = {name: nn.AdamState.for_size(self._size(name), learning_rate)
                     for name in NET_NAMES}
        self.frozen = {name: False for name in NET_NAMES}

    def _size(self, name: str) -> int:
        return sum(p.size for p in self.nets[name].params())

    def param_vector(self, name: str) -> nn.ParamVector:
        return nn.ParamVector.from_arrays(self.nets[name].params())

    def set_param_vector(self, name: str, vec: nn.ParamVector) -> None:
        self.nets[name].set_params(vec.to_arrays())

    def policy(self, obs) -> float:
        """Greedy action on the unit interval."""
        return float(nn.forward(self.nets["mu"], np.asarray(obs, dtype=float)))

    def heads(self, obs_batch: np.ndarray):
        """mu, v, l evaluated on a batch of observations (each shape (K,))."""
        mu = nn.forward(self.nets["mu"], obs_batch)[:, 0]
        v = nn.forward(self.nets["v"], obs_batch)[:, 0]
        l = nn.forward(self.nets["l"], obs_batch)[:, 0]
        return mu, v, l


# ---------------------------------------------------------------------------
# Q-function pieces
# ---------------------------------------------------------------------------


def advantage(agent: NafAgent, obs, a_unit: float) -> float:
    """Quadratic advantage; zero at the policy action, never positive."""
    mu = agent.policy(obs)
    l = float(nn.forward(agent.nets["l"], np.asarray(obs, dtype=float)))
    return -0.5 * (l * l) * (a_unit - mu) ** 2


def q_value(agent: NafAgent, obs, a_unit: float) -> float:
    v = float(nn.forward(agent.nets["v"], np.asarray(obs, dtype=float)))
    return v + advantage(agent, obs, a_unit)


def select_action(agent: NafAgent, obs, noise_scale: float,
                  rng: np.random.Generator) -> float:
    """Policy action plus Gaussian exploration noise, clamped to [0, 1]."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    a = agent.policy(obs)
    if noise_scale > 0:
        a += rng.normal(0.0, noise_scale)
    return float(min(max(a, 0.0), 1.0))


def to_bitrate(a_unit: float, rate_min: float = 2.0, rate_max: float = 10.0) -> float:
    if not -1e-12 <= a_unit <= 1 + 1e-12:
        raise ValueError(f"unit action {a_unit} outside [0, 1]")
    return rate_min + min(max(a_unit, 0.0), 1.0) * (rate_max - rate_min)


def from_bitrate(bitrate: float, rate_min: float = 2.0, rate_max: float = 10.0) -> float:
    if not rate_min - 1e-9 <= bitrate <= rate_max + 1e-9:
        raise ValueError(f"bitrate {bitrate} outside [{rate_min}, {rate_max}]")
    return min(max((bitrate - rate_min) / (rate_max - rate_min), 0.0), 1.0)


def td_target(reward: float, next_obs, target_v: nn.Mlp, gamma: float,
              terminal: bool = False) -> float:
    """Bootstrap target; terminal transitions take the bare reward."""
    if terminal:
        return float(reward)
    return float(reward) + gamma * float(nn.forward(target_v, np.asarray(next_obs, dtype=float)))


def _batch_arrays(batch):
    obs = np.stack([np.asarray(t.observation, dtype=float) for t in batch])
    act = np.array([t.action_unit for t in batch], dtype=float)
    rew = np.array([t.scalar_reward for t in batch], dtype=float)
    nxt = np.stack([np.asarray(t.next_observation, dtype=float) for t in batch])
    term = np.array([t.terminal for t in batch], dtype=bool)
    return obs, act, rew, nxt, term


def td_targets(agent: NafAgent, batch, gamma: float) -> np.ndarray:
    _, _, rew, nxt, term = _batch_arrays(batch)
    v_next = nn.forward(agent.targets["v"], nxt)[:, 0]
    return rew + gamma * v_next * (~term)


def batch_loss(agent: NafAgent, batch, gamma: float) -> float:
    """Mean squared TD error of the batch against the target net."""
    if not batch:
        raise ValueError("batch must be non-empty")
    obs, act, _, _, _ = _batch_arrays(batch)
    y = td_targets(agent, batch, gamma)
    mu, v, l = agent.heads(obs)
    q = v - 0.5 * (l * l) * (act - mu) ** 2
    return float(np.mean((y - q) ** 2))


def loss_and_grads(agent: NafAgent, batch, gamma: float):
    """TD loss and flat per-net gradients, computed in one backward pass."""
    if not batch:
        raise ValueError("batch must be non-empty")
    obs, act, _, _, _ = _batch_arrays(batch)
    y = td_targets(agent, batch, gamma)
    mu, v, l = agent.heads(obs)
    diff = act - mu
    p = l * l
    q = v - 0.5 * p * diff ** 2
    err = y - q
    loss = float(np.mean(err ** 2))

    dq = (-2.0 / len(batch)) * err          # dLoss/dQ per sample
    upstream = {
        "v": dq,                            # dQ/dV = 1
        "mu": dq * p * diff,                # dQ/dmu = P * (a - mu)
        "l": dq * (-l * diff ** 2),         # dQ/dl = -l * (a - mu)^2
    }
    grads = {}
    for name in NET_NAMES:
        g = nn.backward(agent.nets[name], obs, upstream[name][:, None])
        grads[name] = nn.ParamVector.from_arrays(g).flat
    return loss, grads


def update(agent: NafAgent, batch, gamma: float) -> float:
    """One Adam step on every unfrozen head, then soft target refresh."""
    loss, grads = loss_and_grads(agent, batch, gamma)
    if not np.isfinite(loss):
        raise ValueError(f"non-finite loss {loss}; update skipped")
    live = [name for name in NET_NAMES if not agent.frozen[name]]
    clipped, _ = nn.clip_global_norm([grads[n] for n in live], agent.grad_clip)
    for name, g in zip(live, clipped):
        vec = agent.param_vector(name)
        vec.flat = nn.adam_step(agent.adam[name], vec.flat, g)
        agent.set_param_vector(name, vec)
    for name in ("v", "l"):
        tgt = nn.ParamVector.from_arrays(agent.targets[name].params())
        cur = agent.param_vector(name)
        agent.targets[name].set_params(
            nn.soft_update(tgt, cur, agent.target_rate).to_arrays())
    return loss


# ---------------------------------------------------------------------------
# Agent checkpointing
# ---------------------------------------------------------------------------

_NET_ORDER = ("mu", "v", "l", "target_v", "target_l")


def _net_by_slot(agent: NafAgent, slot: str) -> nn.Mlp:
    if slot.startswith("target_"):
        return agent.targets[slot.split("_", 1)[1]]
    return agent.nets[slot]


def save_agent(agent: NafAgent, path) -> None:
    manifest = {
        "kind": "naf-agent",
        "obs_dim": agent.obs_dim,
        "hidden": list(agent.hidden),
        "learning_rate": agent.learning_rate,
        "target_rate": agent.target_rate,
        "grad_clip": agent.grad_clip,
        "frozen": {k: bool(v) for k, v in agent.frozen.items()},
        "nets": {slot: nn.mlp_manifest(_net_by_slot(agent, slot))
                 for slot in _NET_ORDER},
        "order": list(_NET_ORDER),
    }
    flats = [nn.ParamVector.from_arrays(_net_by_slot(agent, slot).params()).flat
             for slot in _NET_ORDER]
    nn.save_checkpoint(path, manifest, np.concatenate(flats))


def load_agent(path) -> NafAgent:
    manifest, flat = nn.load_checkpoint(path)
    if manifest.get("kind") != "naf-agent":
        raise nn.CheckpointError(f"{path}: not an agent checkpoint")
    agent = NafAgent(manifest["obs_dim"], tuple(manifest["hidden"]),
                     manifest["learning_rate"], manifest["target_rate"],
                     manifest["grad_clip"], rng=0)
    start = 0
    for slot in manifest["order"]:
        net = _net_by_slot(agent, slot)
        size = sum(p.size for p in net.params())
        piece = flat[start:start + size]
        if piece.size != size:
            raise nn.CheckpointError(f"{path}: truncated parameters for {slot}")
        net.set_params(nn.mlp_from_manifest(manifest["nets"][slot], piece).params())
        start += size
    if start != flat.size:
        raise nn.CheckpointError(f"{path}: trailing parameter bytes")
    agent.frozen = {k: bool(v) for k, v in manifest["frozen"].items()}
    return agent
