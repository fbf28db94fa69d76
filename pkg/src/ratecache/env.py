"""Cache-enabled video streaming environment.

A single mobile user moves through a chain of small-cell base stations,
each holding the same content cache. Every slot the user requests one
content item, the controller picks a chunk bitrate, and the network
delivers as many chunks as the current capacity allows. The reward is a
weighted QoE score built from four signed components: backhaul cost on a
cache miss, playback quality, dropped-chunk playback time, and freeze
time.

Chunks are fixed-length (``chunk_length`` seconds) and the device buffer
is a FIFO vector of chunk bitrates; a slot of zero marks an empty
position and empty positions are always a suffix of the vector.
"""

import csv
import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid environment configuration; message lists every violation."""


class InvariantError(RuntimeError):
    """A state handed to the dynamics violates its invariants."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    """Static description of one simulated world.

    ``content_sizes`` must hold one size (megabits) per content id; use
    :func:`default_config` to draw sizes and a cache set deterministically
    from a seed.
    """

    num_base_stations: int = 20
    num_contents: int = 100
    cache_set: frozenset = frozenset(range(1, 21))
    content_sizes: tuple = ()
    chunk_length: float = 10.0          # seconds per video chunk
    buffer_capacity: float = 180.0      # megabits
    rate_min: float = 2.0               # Mb/s
    rate_max: float = 10.0              # Mb/s
    capacity_min: float = 2.0           # Mb/s
    capacity_max: float = 80.0          # Mb/s
    zipf_exponent: float = 0.8
    mean_sojourn: float = 60.0          # seconds per base station
    slot_length: float = 10.0           # seconds per decision slot
    weights: tuple = (1.0, 1.0, 1.0, 1.0)
    discount: float = 0.99
    backhaul_rate: float = 100.0        # Mb/s server-to-edge link
    cost_per_megabit: float = 0.1       # backhaul cost scaling
    buffer_slots: int = 16
    capacity_rho: float = 0.0           # AR(1) correlation; 0 = i.i.d. uniform
    seed: int = 0

    def violations(self) -> list:
        """Return human-readable descriptions of every broken invariant."""
        bad = []
        if self.num_base_stations < 1:
            bad.append("num_base_stations must be >= 1")
        if self.num_contents < 1:
            bad.append("num_contents must be >= 1")
        if not (0 < self.rate_min <= self.rate_max):
            bad.append("need 0 < rate_min <= rate_max")
        if not (0 < self.capacity_min <= self.capacity_max):
            bad.append("need 0 < capacity_min <= capacity_max")
        if self.buffer_capacity <= 0:
            bad.append("buffer_capacity must be positive")
        if self.chunk_length <= 0 or self.slot_length <= 0:
            bad.append("chunk_length and slot_length must be positive")
        if not set(self.cache_set) <= set(range(1, self.num_contents + 1)):
            bad.append("cache_set must be a subset of {1..num_contents}")
        if len(self.content_sizes) != self.num_contents:
            bad.append("content_sizes must list one size per content")
        elif any(s <= 0 for s in self.content_sizes):
            bad.append("content_sizes must all be positive")
        if not (0 < self.discount < 1):
            bad.append("discount must lie in (0, 1)")
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            bad.append("weights must be four nonnegative values")
        if self.zipf_exponent < 0:
            bad.append("zipf_exponent must be >= 0")
        if self.mean_sojourn <= 0:
            bad.append("mean_sojourn must be positive")
        if self.backhaul_rate <= 0:
            bad.append("backhaul_rate must be positive")
        if self.buffer_slots * self.rate_min * self.chunk_length < self.buffer_capacity:
            bad.append("buffer_slots * rate_min * chunk_length must cover buffer_capacity")
        if not (0 <= self.capacity_rho < 1):
            bad.append("capacity_rho must lie in [0, 1)")
        return bad

    def validate(self) -> "EnvConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid config: " + "; ".join(bad))
        return self


def default_config(seed: int = 0, **overrides) -> EnvConfig:
    """Build a validated config, drawing content sizes from the seed.

    Sizes are uniform on [20, 100] Mb and the cache holds the most
    popular fifth of the catalogue (ids 1..L/5), unless overridden.
    """
    base = EnvConfig(seed=seed)
    num = overrides.get("num_contents", base.num_contents)
    if "content_sizes" not in overrides:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
        overrides["content_sizes"] = tuple(rng.uniform(20.0, 100.0, size=num))
    if "cache_set" not in overrides:
        overrides["cache_set"] = frozenset(range(1, max(1, num // 5) + 1))
    return dataclasses.replace(base, seed=seed, **overrides).validate()


@dataclass(frozen=True)
class SystemState:
    """Capacity, requested content, FIFO buffer, and mobility bookkeeping."""

    capacity: float                 # Mb/s observed this slot
    request: int                    # content id in {1..L}
    buffer: tuple                   # chunk bitrates, zero-padded suffix
    bs_index: int = 1               # serving base station in {1..F}
    sojourn_remaining: float = 0.0  # seconds until handoff


@dataclass(frozen=True)
class RateAction:
    """Chunk bitrate for the slot: 0 (idle) or a value in [rate_min, rate_max]."""

    bitrate: float


@dataclass(frozen=True)
class RewardBreakdown:
    """Signed QoE components and their weighted combination.

    cache_miss and the two delay terms are stored already negated, so
    ``weighted_total`` is a plain weighted sum of the four fields.
    """

    cache_miss: float   # <= 0
    quality: float      # >= 0
    loss: float         # <= 0
    freeze: float       # <= 0
    weights: tuple
    weighted_total: float

    @classmethod
    def build(cls, cache_miss, quality, loss, freeze, weights) -> "RewardBreakdown":
        comps = (cache_miss, quality, loss, freeze)
        return cls(cache_miss, quality, loss, freeze, tuple(weights),
                   qoe_reward(comps, weights))

    def components(self) -> np.ndarray:
        return np.array([self.cache_miss, self.quality, self.loss, self.freeze])


@dataclass(frozen=True)
class StepOutcome:
    next_state: SystemState
    reward: RewardBreakdown
    delivered_chunks: int
    dropped_playback: float     # seconds of playback lost to drops
    cache_hit: bool


# ---------------------------------------------------------------------------
# Reward and popularity primitives
# ---------------------------------------------------------------------------


def zipf_pmf(rank: int, exponent: float, population: int) -> float:
    """Probability of the content at ``rank`` under a Zipf law."""
    if population < 1:
        raise ValueError(f"population must be >= 1, got {population}")
    if not 1 <= rank <= population:
        raise ValueError(f"rank {rank} outside 1..{population}")
    if exponent < 0:
        raise ValueError(f"exponent must be >= 0, got {exponent}")
    norm = np.sum(1.0 / np.arange(1, population + 1, dtype=float) ** exponent)
    return (1.0 / rank ** exponent) / norm


def zipf_distribution(exponent: float, population: int) -> np.ndarray:
    """Full Zipf pmf over ranks 1..population."""
    if population < 1:
        raise ValueError(f"population must be >= 1, got {population}")
    if exponent < 0:
        raise ValueError(f"exponent must be >= 0, got {exponent}")
    terms = 1.0 / np.arange(1, population + 1, dtype=float) ** exponent
    return terms / terms.sum()


def sample_request(rng: np.random.Generator, pmf: np.ndarray) -> int:
    """Draw a 1-based content id from a popularity pmf."""
    return int(rng.choice(len(pmf), p=pmf)) + 1


def chunks_for(capacity: float, bitrate: float) -> int:
    """How many equal-rate chunks fit through the link in one chunk-length."""
    if bitrate <= 0:
        return 0
    return int(math.floor(capacity / bitrate))


def cache_miss_cost(request: int, cache_set, content_sizes: Sequence,
                    cost_per_megabit: float = 0.1) -> float:
    """Backhaul cost of fetching ``request``; zero when it is cached."""
    if not 1 <= request <= len(content_sizes):
        raise ValueError(f"unknown content id {request}")
    if request in cache_set:
        return 0.0
    return content_sizes[request - 1] * cost_per_megabit


def playback_quality(consumed_bitrates: Iterable) -> float:
    """Accumulated bitrate of the chunks actually watched this slot."""
    return float(sum(consumed_bitrates))


def packet_loss_cost(incoming_size: float, buffer_fill: float, capacity: float,
                     chunk_length: float, accepted: int, offered: int) -> float:
    """Playback seconds of the offered chunks that the buffer rejected.

    Fires only when the incoming megabits would overflow the buffer; the
    rejected chunks are the offered ones beyond ``accepted``.
    """
    if incoming_size + buffer_fill > capacity:
        return (offered - accepted) * chunk_length
    return 0.0


def freeze_cost(slot: float, cache_hit: bool, download_time: float,
                buffered_playback: float, accepted: int,
                chunk_length: float) -> float:
    """Stall seconds: slot time not covered by download wait plus playback."""
    wait = 0.0 if cache_hit else download_time
    frozen = slot - wait - buffered_playback - accepted * chunk_length
    return max(frozen, 0.0)


def qoe_reward(components: Sequence, weights: Sequence) -> float:
    """Weighted sum of the four signed QoE components."""
    return float(sum(w * r for w, r in zip(weights, components)))


def buffer_fill_megabits(buffer: Sequence, chunk_length: float) -> float:
    """Total megabits held in the buffer."""
    return float(sum(buffer)) * chunk_length


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def check_state(state: SystemState, config: EnvConfig) -> None:
    """Raise InvariantError if the state is structurally broken."""
    buf = state.buffer
    if len(buf) != config.buffer_slots:
        raise InvariantError(f"buffer has {len(buf)} slots, expected {config.buffer_slots}")
    seen_zero = False
    for b in buf:
        if b == 0:
            seen_zero = True
        elif seen_zero:
            raise InvariantError("buffer violates FIFO packing (gap before content)")
        elif b < 0:
            raise InvariantError("buffer holds a negative bitrate")
    fill = buffer_fill_megabits(buf, config.chunk_length)
    if fill > config.buffer_capacity + 1e-9:
        raise InvariantError(f"buffer fill {fill} exceeds capacity {config.buffer_capacity}")
    if not config.capacity_min <= state.capacity <= config.capacity_max:
        raise InvariantError(f"capacity {state.capacity} outside configured range")
    if not 1 <= state.request <= config.num_contents:
        raise InvariantError(f"request {state.request} outside catalogue")
    if not 1 <= state.bs_index <= config.num_base_stations:
        raise InvariantError(f"bs_index {state.bs_index} outside 1..{config.num_base_stations}")


def _advance_exogenous(config: EnvConfig, state: SystemState,
                       rng: np.random.Generator, pmf: np.ndarray):
    """Draw next-slot capacity, request, and mobility. Draw order is fixed."""
    rho = config.capacity_rho
    fresh = rng.uniform(config.capacity_min, config.capacity_max)
    capacity = rho * state.capacity + (1.0 - rho) * fresh
    request = sample_request(rng, pmf)
    sojourn = state.sojourn_remaining - config.slot_length
    bs = state.bs_index
    if sojourn <= 0:
        bs = bs % config.num_base_stations + 1
        sojourn = rng.exponential(config.mean_sojourn)
    return capacity, request, bs, sojourn


def step(config: EnvConfig, state: SystemState, action,
         rng: np.random.Generator, pmf: np.ndarray = None) -> StepOutcome:
    """Advance one slot: deliver, play back, score, and redraw the exogenous state.

    Within the slot: (1) offered chunks are admitted FIFO up to the free
    megabits, (2) playback dequeues one chunk per chunk-length of slot
    time, (3) overflow and stall are costed, (4) capacity, request, and
    serving cell evolve stochastically.
    """
    check_state(state, config)
    bitrate = action.bitrate if isinstance(action, RateAction) else float(action)
    if not (bitrate == 0.0 or config.rate_min <= bitrate <= config.rate_max):
        raise ValueError(f"bitrate {bitrate} is neither 0 nor in "
                         f"[{config.rate_min}, {config.rate_max}]")
    if pmf is None:
        pmf = zipf_distribution(config.zipf_exponent, config.num_contents)

    chunk_len = config.chunk_length
    cap_mb = config.buffer_capacity
    hit = state.request in config.cache_set

    offered = chunks_for(state.capacity, bitrate)
    fill0 = buffer_fill_megabits(state.buffer, chunk_len)
    queue = [b for b in state.buffer if b > 0]
    occupied0 = len(queue)

    if offered > 0:
        by_megabits = int(math.floor((cap_mb - fill0) / (bitrate * chunk_len) + 1e-12))
        accepted = min(offered, max(by_megabits, 0), config.buffer_slots - occupied0)
    else:
        accepted = 0
    queue.extend([bitrate] * accepted)

    wanted = int(math.floor(config.slot_length / chunk_len + 1e-12))
    consumed = queue[:wanted]
    queue = queue[len(consumed):]

    incoming = offered * bitrate * chunk_len
    loss = packet_loss_cost(incoming, fill0, cap_mb, chunk_len, accepted, offered)
    download = 0.0 if hit else config.content_sizes[state.request - 1] / config.backhaul_rate
    frozen = freeze_cost(config.slot_length, hit, download,
                         occupied0 * chunk_len, accepted, chunk_len)
    miss = cache_miss_cost(state.request, config.cache_set,
                           config.content_sizes, config.cost_per_megabit)
    reward = RewardBreakdown.build(-miss, playback_quality(consumed),
                                   -loss, -frozen, config.weights)

    capacity, request, bs, sojourn = _advance_exogenous(config, state, rng, pmf)
    buffer = tuple(queue) + (0.0,) * (config.buffer_slots - len(queue))
    nxt = SystemState(capacity, request, buffer, bs, sojourn)
    return StepOutcome(nxt, reward, accepted, loss, hit)


def reset(config: EnvConfig, rng: np.random.Generator,
          pmf: np.ndarray = None) -> SystemState:
    """Fresh state: empty buffer, first cell, exogenous variables drawn."""
    config.validate()
    if pmf is None:
        pmf = zipf_distribution(config.zipf_exponent, config.num_contents)
    capacity = rng.uniform(config.capacity_min, config.capacity_max)
    request = sample_request(rng, pmf)
    sojourn = rng.exponential(config.mean_sojourn)
    return SystemState(capacity, request, (0.0,) * config.buffer_slots, 1, sojourn)


# ---------------------------------------------------------------------------
# Observation encoding
# ---------------------------------------------------------------------------


def observation_size(config: EnvConfig) -> int:
    return 5 + config.buffer_slots


def encode_observation(state: SystemState, config: EnvConfig) -> np.ndarray:
    """Fixed-length feature vector with every entry in [0, 1]."""
    max_size = max(config.content_sizes)
    fill = buffer_fill_megabits(state.buffer, config.chunk_length)
    occupied = sum(1 for b in state.buffer if b > 0)
    head = [
        state.capacity / config.capacity_max,
        1.0 if state.request in config.cache_set else 0.0,
        config.content_sizes[state.request - 1] / max_size,
        fill / config.buffer_capacity,
        occupied / config.buffer_slots,
    ]
    tail = [b / config.rate_max for b in state.buffer]
    return np.array(head + tail, dtype=float)


# ---------------------------------------------------------------------------
# Stateful wrapper
# ---------------------------------------------------------------------------


class Env:
    """Config plus a private generator, with the pmf cached.

    Instances are independent; a single instance must not be stepped from
    two threads at once.
    """

    def __init__(self, config: EnvConfig, rng=None):
        self.config = config.validate()
        self.rng = rng if isinstance(rng, np.random.Generator) else \
            np.random.default_rng(config.seed if rng is None else rng)
        self.pmf = zipf_distribution(config.zipf_exponent, config.num_contents)

    @property
    def rate_min(self) -> float:
        return self.config.rate_min

    @property
    def rate_max(self) -> float:
        return self.config.rate_max

    def reset(self) -> SystemState:
        return reset(self.config, self.rng, self.pmf)

    def step(self, state: SystemState, action) -> StepOutcome:
        return step(self.config, state, action, self.rng, self.pmf)

    def observe(self, state: SystemState) -> np.ndarray:
        return encode_observation(state, self.config)

    def observation_size(self) -> int:
        return observation_size(self.config)


# ---------------------------------------------------------------------------
# External interfaces: config dict round-trip and trajectory dumps
# ---------------------------------------------------------------------------

_LIST_FIELDS = {"cache_set", "content_sizes", "weights"}


def env_config_to_dict(config: EnvConfig) -> dict:
    out = {}
    for field in dataclasses.fields(EnvConfig):
        value = getattr(config, field.name)
        if field.name == "cache_set":
            value = sorted(value)
        elif field.name in _LIST_FIELDS:
            value = list(value)
        out[field.name] = value
    return out


def env_config_from_dict(data: dict) -> EnvConfig:
    known = {f.name for f in dataclasses.fields(EnvConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(data)
    if "cache_set" in kwargs:
        kwargs["cache_set"] = frozenset(int(c) for c in kwargs["cache_set"])
    if "content_sizes" in kwargs:
        kwargs["content_sizes"] = tuple(float(s) for s in kwargs["content_sizes"])
    if "weights" in kwargs:
        kwargs["weights"] = tuple(float(w) for w in kwargs["weights"])
    return EnvConfig(**kwargs).validate()


TRAJECTORY_COLUMNS = ["slot", "bs", "capacity", "request", "cache_hit",
                      "action_bitrate", "tau", "r1", "r2", "r3", "r4",
                      "reward", "buffer_fill"]


def trajectory_record(slot: int, state: SystemState, bitrate: float,
                      outcome: StepOutcome, config: EnvConfig) -> dict:
    """One trajectory CSV row for the slot that ran from ``state``."""
    r = outcome.reward
    return {
        "slot": slot,
        "bs": state.bs_index,
        "capacity": repr(state.capacity),
        "request": state.request,
        "cache_hit": int(outcome.cache_hit),
        "action_bitrate": repr(float(bitrate)),
        "tau": outcome.delivered_chunks,
        "r1": repr(r.cache_miss),
        "r2": repr(r.quality),
        "r3": repr(r.loss),
        "r4": repr(r.freeze),
        "reward": repr(r.weighted_total),
        "buffer_fill": repr(buffer_fill_megabits(state.buffer, config.chunk_length)),
    }


def write_trajectory_csv(path, records: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec)
