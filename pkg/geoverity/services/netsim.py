"""netsim.py — seeded geographic delay model.

    owd(p→q) = circuitous(p,q) · asymmetry(p→q) · distance(p,q) / (speed_factor · c)
               + jitter + access delay of each WIFI endpoint

Every random draw comes from a numpy Generator seeded by (seed, stream tag,
node keys, chunk), so a sample depends only on the topology seed, the two
endpoints and the message index.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import OrderedDict
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Final

import numpy as np

from geoverity.enums import AccessType, AdversaryKind, DistanceMetric, JitterKind, PuzzleStrategy
from geoverity.services import config as cfg
from geoverity.services.geometry import GeoPoint, centroid, distance_km

logger = logging.getLogger(__name__)

_CHUNK: Final[int] = 256
_CACHE_CHUNKS: Final[int] = 4096

# stream tags keep independent draws apart
_TAG_JITTER: Final[int] = 1
_TAG_PAIR: Final[int] = 2
_TAG_WIFI: Final[int] = 3
_TAG_AUX: Final[int] = 4


class NetsimError(RuntimeError):
    pass


class UnknownNodeError(NetsimError):
    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        super().__init__(f"unknown node: {node_id}")


def node_key(node_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(node_id.encode(), digest_size=8).digest(), "big")


@dataclass(frozen=True, slots=True)
class SimNode:
    node_id: str
    location: GeoPoint
    access_type: AccessType = AccessType.WIRED


@dataclass(frozen=True, slots=True)
class DelayModelParams:
    speed_factor: float = cfg.FIBER_SPEED_FACTOR
    jitter: JitterKind = JitterKind.EXPONENTIAL
    jitter_mean_ms: float = cfg.JITTER_MEAN_MS
    lognormal_mu: float = 0.0
    lognormal_sigma: float = 0.5
    asymmetry_range: tuple[float, float] = cfg.ASYMMETRY_RANGE
    circuitous_range: tuple[float, float] = cfg.CIRCUITOUS_RANGE

    def __post_init__(self) -> None:
        if not 0.0 < self.speed_factor <= 1.0:
            raise NetsimError(f"speed factor must be in (0, 1]: {self.speed_factor}")
        for name, (lo, hi) in (("asymmetry", self.asymmetry_range), ("circuitous", self.circuitous_range)):
            if not 1.0 <= lo <= hi:
                raise NetsimError(f"{name} range must satisfy 1 <= lo <= hi: {(lo, hi)}")

    @classmethod
    def noiseless(cls, speed_factor: float = cfg.FIBER_SPEED_FACTOR) -> DelayModelParams:
        return cls(
            speed_factor=speed_factor,
            jitter=JitterKind.NONE,
            asymmetry_range=(1.0, 1.0),
            circuitous_range=(1.0, 1.0),
        )

    @property
    def km_per_ms(self) -> float:
        return self.speed_factor * cfg.LIGHT_SPEED_KM_PER_MS

    @property
    def jitter_mean(self) -> float:
        if self.jitter is JitterKind.EXPONENTIAL:
            return self.jitter_mean_ms
        if self.jitter is JitterKind.LOGNORMAL:
            return math.exp(self.lognormal_mu + self.lognormal_sigma**2 / 2.0)
        return 0.0


@dataclass(frozen=True, slots=True)
class Wifi80211Params:
    slot_us: float = cfg.WIFI_SLOT_US
    gateway_prop_us: float = cfg.WIFI_GATEWAY_PROP_US
    competing_stations: int = cfg.WIFI_COMPETING_STATIONS
    cw_min: int = cfg.WIFI_CW_MIN
    cw_max: int = cfg.WIFI_CW_MAX
    max_retries: int = cfg.WIFI_MAX_RETRIES


def wifi_access_delay(params: Wifi80211Params, rng: np.random.Generator) -> float:
    """Slotted contention delay in ms.

    Each attempt draws a backoff uniformly from the contention window; a
    collision (another station choosing the same slot, probability
    1 - (1 - 1/CW)^competing) doubles the window, up to ``max_retries`` retries.
    """
    cw = params.cw_min
    slots = 0
    for _ in range(params.max_retries + 1):
        slots += int(rng.integers(0, cw))
        if params.competing_stations == 0:
            break
        collision = 1.0 - (1.0 - 1.0 / cw) ** params.competing_stations
        if rng.random() >= collision:
            break
        cw = min(2 * cw, params.cw_max)
    return (slots * params.slot_us + params.gateway_prop_us) / 1000.0


@dataclass(frozen=True, slots=True)
class AdversaryConfig:
    kind: AdversaryKind = AdversaryKind.NONE
    # DELAY_INFLATE: directed legs (src, dst); "*" matches any node
    target_legs: tuple[tuple[str, str], ...] = ()
    added_ms: float = 0.0
    # MIDDLEBOX_RELAY
    middlebox_node: str | None = None
    client_true_node: str | None = None
    strategy: PuzzleStrategy = PuzzleStrategy.FORWARD_TO_CLIENT
    relayed_clients: int = 1
    cores: int = 1
    core_hash_rate: float = 100.0

    def __post_init__(self) -> None:
        if self.added_ms < 0.0:
            raise NetsimError("an external adversary can only add delay")
        if self.kind is AdversaryKind.MIDDLEBOX_RELAY and self.middlebox_node is None:
            raise NetsimError("middlebox relay needs a middlebox node")

    def inflation(self, src: str, dst: str) -> float:
        if self.kind is not AdversaryKind.DELAY_INFLATE:
            return 0.0
        for leg_src, leg_dst in self.target_legs:
            if leg_src in ("*", src) and leg_dst in ("*", dst):
                return self.added_ms
        return 0.0


@dataclass(slots=True)
class _Chunk:
    jitter: np.ndarray
    wifi: dict[str, np.ndarray] = field(default_factory=dict)


class SimTopology:
    def __init__(
        self,
        nodes: Iterable[SimNode],
        *,
        delay: DelayModelParams | None = None,
        wifi: Wifi80211Params | None = None,
        seed: int = 0,
        metric: DistanceMetric = DistanceMetric.GREAT_CIRCLE,
        origin: GeoPoint | None = None,
    ) -> None:
        self.nodes: dict[str, SimNode] = {}
        for node in nodes:
            if node.node_id in self.nodes:
                raise NetsimError(f"duplicate node id: {node.node_id}")
            self.nodes[node.node_id] = node
        self.delay = delay or DelayModelParams()
        self.wifi = wifi or Wifi80211Params()
        self.seed = seed & 0xFFFF_FFFF_FFFF_FFFF
        self.metric = metric
        if origin is None and metric is DistanceMetric.PLANAR and self.nodes:
            origin = centroid([n.location for n in self.nodes.values()])
        self.origin = origin
        self._keys = {node_id: node_key(node_id) for node_id in self.nodes}
        self._pairs: dict[tuple[str, str], tuple[float, float]] = {}
        self._chunks: OrderedDict[tuple[str, str, int], _Chunk] = OrderedDict()

    def node(self, node_id: str) -> SimNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(node_id) from None

    def with_access(self, node_ids: Iterable[str], access_type: AccessType) -> SimTopology:
        """Copy with the given nodes switched to ``access_type``; the seed is kept."""
        wanted = set(node_ids)
        return SimTopology(
            (
                SimNode(n.node_id, n.location, access_type) if n.node_id in wanted else n
                for n in self.nodes.values()
            ),
            delay=self.delay,
            wifi=self.wifi,
            seed=self.seed,
            metric=self.metric,
            origin=self.origin,
        )

    def stream(self, tag: int, *parts: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, tag, *parts])

    def distance_km(self, src: str, dst: str) -> float:
        return distance_km(
            self.node(src).location, self.node(dst).location, metric=self.metric, origin=self.origin
        )

    def _pair_factors(self, src: str, dst: str) -> tuple[float, float]:
        """(circuitous factor, asymmetry factor of the src→dst direction)."""
        cached = self._pairs.get((src, dst))
        if cached is not None:
            return cached
        lo_id, hi_id = sorted((src, dst))
        rng = self.stream(_TAG_PAIR, self._keys[lo_id], self._keys[hi_id])
        circuitous = float(rng.uniform(*self.delay.circuitous_range))
        skew = float(rng.uniform(*self.delay.asymmetry_range))
        slow_forward = bool(rng.random() < 0.5)
        # the skew applies to exactly one direction of the pair
        forward = (circuitous, skew if slow_forward else 1.0)
        reverse = (circuitous, 1.0 if slow_forward else skew)
        self._pairs[(lo_id, hi_id)] = forward
        self._pairs[(hi_id, lo_id)] = reverse
        return self._pairs[(src, dst)]

    def propagation_ms(self, src: str, dst: str) -> float:
        self.node(src)
        self.node(dst)
        if src == dst:
            return 0.0
        circuitous, skew = self._pair_factors(src, dst)
        return circuitous * skew * self.distance_km(src, dst) / self.delay.km_per_ms

    def expected_owd(self, src: str, dst: str) -> float:
        """Mean one-way delay excluding WiFi access delay."""
        return self.propagation_ms(src, dst) + self.delay.jitter_mean

    def _chunk(self, src: str, dst: str, chunk: int) -> _Chunk:
        key = (src, dst, chunk)
        cached = self._chunks.get(key)
        if cached is not None:
            self._chunks.move_to_end(key)
            return cached
        rng = self.stream(_TAG_JITTER, self._keys[src], self._keys[dst], chunk)
        params = self.delay
        if params.jitter is JitterKind.EXPONENTIAL:
            jitter = rng.exponential(params.jitter_mean_ms, size=_CHUNK)
        elif params.jitter is JitterKind.LOGNORMAL:
            jitter = rng.lognormal(params.lognormal_mu, params.lognormal_sigma, size=_CHUNK)
        else:
            jitter = np.zeros(_CHUNK)
        entry = _Chunk(jitter=jitter)
        self._chunks[key] = entry
        if len(self._chunks) > _CACHE_CHUNKS:
            self._chunks.popitem(last=False)
        return entry

    def _wifi_draws(self, entry: _Chunk, src: str, dst: str, chunk: int, side: str) -> np.ndarray:
        draws = entry.wifi.get(side)
        if draws is None:
            rng = self.stream(_TAG_WIFI, self._keys[src], self._keys[dst], chunk, 0 if side == "src" else 1)
            draws = np.array([wifi_access_delay(self.wifi, rng) for _ in range(_CHUNK)])
            entry.wifi[side] = draws
        return draws

    def sample_owd(self, src: str, dst: str, msg_index: int) -> float:
        source, target = self.node(src), self.node(dst)
        if msg_index < 0:
            raise NetsimError(f"message index must be non-negative: {msg_index}")
        owd = self.propagation_ms(src, dst)
        wants_wifi = AccessType.WIFI in (source.access_type, target.access_type)
        if self.delay.jitter is JitterKind.NONE and not wants_wifi:
            return max(owd, cfg.HOP_PROCESSING_MS)

        chunk, offset = divmod(msg_index, _CHUNK)
        entry = self._chunk(src, dst, chunk)
        owd += float(entry.jitter[offset])
        if source.access_type is AccessType.WIFI:
            owd += float(self._wifi_draws(entry, src, dst, chunk, "src")[offset])
        if target.access_type is AccessType.WIFI:
            owd += float(self._wifi_draws(entry, src, dst, chunk, "dst")[offset])
        return max(owd, cfg.HOP_PROCESSING_MS)

    def aux_stream(self, *parts: int | str) -> np.random.Generator:
        """Generator for per-message draws outside the delay model (e.g. solve times)."""
        keys = [node_key(p) if isinstance(p, str) else p for p in parts]
        return self.stream(_TAG_AUX, *keys)


def sample_owd(topology: SimTopology, src: str, dst: str, msg_index: int) -> float:
    return topology.sample_owd(src, dst, msg_index)
