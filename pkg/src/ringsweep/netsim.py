"""Deterministic lossy, delayed phase-message transport over the ring.

Robots exchange only their phase. Every directed link owns an independent
random stream derived from the network seed and the (source, destination)
pair, and every send draws the same two numbers (drop test, jitter sample)
whether or not the link is up or the message survives. Replays with the
same seed therefore reproduce identical traffic, and scheduling an outage
on one link cannot perturb the randomness of any other.

Receivers only care about the freshest state of a peer: poll keeps the
highest-sequence message that has arrived and stragglers older than what
was already seen are discarded, so out-of-order delivery under jitter never
makes a neighbor estimate go backwards.
"""

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

LINK_UP = "up"
LINK_DOWN = "down"
LINK_DELAY = "delay_override"


@dataclass(frozen=True)
class Message:
    sender: int
    theta: float
    sent_at: float
    deliver_at: float
    seq: int


@dataclass(frozen=True)
class NetworkConfig:
    base_delay: float = 0.0
    jitter: float = 0.0
    drop_prob: float = 0.0
    seed: int = 0
    per_link_overrides: dict = None

    def __post_init__(self):
        if self.base_delay < 0 or self.jitter < 0:
            raise ValueError("base_delay and jitter must be nonnegative")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must be in [0, 1], got {self.drop_prob}")

    def link_params(self, src, dst):
        over = (self.per_link_overrides or {}).get((src, dst), {})
        return (
            over.get("base_delay", self.base_delay),
            over.get("jitter", self.jitter),
            over.get("drop_prob", self.drop_prob),
        )


@dataclass
class _Link:
    rng: np.random.Generator
    seq: int = 0
    pending: list = field(default_factory=list)  # heap of (deliver_at, seq, message)
    best: Message = None
    schedule: list = field(default_factory=list)  # sorted (at, state, value)
    sent: int = 0
    dropped: int = 0

    def state_at(self, now):
        state, value = LINK_UP, None
        for at, s, v in self.schedule:
            if at > now:
                break
            state, value = s, v
        return state, value


class Network:
    """Phase transport between ring neighbors."""

    def __init__(self, topology, config=None):
        self.topology = topology
        self.config = config if config is not None else NetworkConfig()
        self._links = {}

    def _link(self, src, dst):
        if dst not in self.topology.neighbors(src):
            raise ValueError(f"({src}, {dst}) is not a ring edge")
        key = (src, dst)
        link = self._links.get(key)
        if link is None:
            link = _Link(rng=np.random.default_rng([self.config.seed, src, dst]))
            self._links[key] = link
        return link

    def set_link(self, src, dst, state, at, value=None):
        """Schedule a link state change at a logical time.

        state is one of "up", "down", "delay_override" (value = delay in
        seconds). Changes apply to sends issued at or after the given time;
        messages already in flight still arrive.
        """
        if state not in (LINK_UP, LINK_DOWN, LINK_DELAY):
            raise ValueError(f"unknown link state {state!r}")
        if state == LINK_DELAY and (value is None or value < 0):
            raise ValueError("delay_override needs a nonnegative value")
        link = self._link(src, dst)
        link.schedule.append((float(at), state, value))
        link.schedule.sort(key=lambda e: e[0])

    def send(self, src, dst, theta, now):
        """Offer a phase message to the link; returns True if it went out.

        The drop and jitter draws happen unconditionally so that a link's
        random stream depends only on how many sends were attempted, not on
        outages or earlier losses.
        """
        link = self._link(src, dst)
        u_drop, u_jitter = link.rng.random(2)
        seq = link.seq
        link.seq += 1
        link.sent += 1
        state, override = link.state_at(now)
        if state == LINK_DOWN:
            link.dropped += 1
            return False
        delay, jitter, drop_prob = self.config.link_params(src, dst)
        if state == LINK_DELAY:
            delay = override
        if u_drop < drop_prob:
            link.dropped += 1
            return False
        deliver_at = max(now, now + delay + jitter * (2.0 * u_jitter - 1.0))
        msg = Message(
            sender=src, theta=float(theta), sent_at=float(now),
            deliver_at=float(deliver_at), seq=seq,
        )
        heapq.heappush(link.pending, (deliver_at, seq, msg))
        return True

    def poll(self, dst, now):
        """Freshest delivered message per ring neighbor (None if none yet).

        Freshness is by sequence number, not arrival order, so a straggler
        that arrives after a newer message never wins. Idempotent for a
        fixed time.
        """
        out = {}
        for src in self.topology.neighbors(dst):
            link = self._link(src, dst)
            while link.pending and link.pending[0][0] <= now:
                _, _, msg = heapq.heappop(link.pending)
                if link.best is None or msg.seq > link.best.seq:
                    link.best = msg
            out[src] = link.best
        return out

    def staleness(self, dst, neighbor, now):
        """Age of the freshest delivered message from neighbor (inf if none)."""
        link = self._link(neighbor, dst)
        while link.pending and link.pending[0][0] <= now:
            _, _, msg = heapq.heappop(link.pending)
            if link.best is None or msg.seq > link.best.seq:
                link.best = msg
        if link.best is None:
            return math.inf
        return now - link.best.sent_at

    def stats(self, src, dst):
        link = self._link(src, dst)
        return {"sent": link.sent, "dropped": link.dropped}
