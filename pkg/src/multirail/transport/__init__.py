"""Rails, channels and connection bootstrap."""
from __future__ import annotations

import threading
import uuid
from typing import Sequence

from ..core import RailProfile
from .channel import Channel, InMemoryChannel, InMemoryLink, SendHandle, wait_all
from .frame import (BindError, ChannelDown, Frame, MsgType, ProtocolError, RendezvousTimeout,
                    TransportError, decode, encode, fragment, frame_count)
from .rendezvous import ENV_DIR, ConnectionSet, FileStore, rendezvous, socket_pair
from .shaping import PhysicalLink, Shaper, sleep_until
from .sockets import SocketChannel


class Transport:
    """Factory for a rank's :class:`ConnectionSet`."""

    kind = "abstract"

    def establish(self, rank: int, world_size: int, rails: Sequence[RailProfile]) -> ConnectionSet:
        raise NotImplementedError


class InMemoryNetwork:
    """Full in-process mesh; every (rail, rank pair) gets its own channel pair.

    With ``shared_link=True`` all rails between a pair of ranks ride one
    :class:`InMemoryLink`, i.e. they are virtual channels of one link.
    """

    def __init__(self, world_size: int, rails: Sequence[RailProfile], shared_link: bool = False):
        if world_size < 2:
            raise ValueError("world_size must be >= 2")
        self.world_size = world_size
        self.rails = list(rails)
        self._chans: dict[tuple[int, int, int], InMemoryChannel] = {}
        for a in range(world_size):
            for b in range(a + 1, world_size):
                link = InMemoryLink(f"mem{a}-{b}") if shared_link else None
                for r in self.rails:
                    l = link or InMemoryLink(f"mem{a}-{b}-rail{r.rail_id}")
                    ca, cb = InMemoryChannel.pair(a, b, r.rail_id, l)
                    self._chans[(r.rail_id, a, b)] = ca
                    self._chans[(r.rail_id, b, a)] = cb

    def channel(self, rail_id: int, rank: int, peer: int) -> InMemoryChannel:
        return self._chans[(rail_id, rank, peer)]

    def connection_set(self, rank: int) -> ConnectionSet:
        chans = {(r, p): ch for (r, me, p), ch in self._chans.items() if me == rank}
        return ConnectionSet(rank, self.world_size, self.rails, chans)

    def inject_close(self, rank: int, rail_id: int, peer: int, at_frame: int) -> None:
        self.channel(rail_id, rank, peer).inject_close(at_frame)

    def reconnect_rail(self, rail_id: int) -> dict[int, dict[int, InMemoryChannel]]:
        """Fresh channel pairs for one rail; returns {rank: {peer: channel}}."""
        out: dict[int, dict[int, InMemoryChannel]] = {r: {} for r in range(self.world_size)}
        for a in range(self.world_size):
            for b in range(a + 1, self.world_size):
                ca, cb = InMemoryChannel.pair(a, b, rail_id, InMemoryLink(f"mem{a}-{b}-rail{rail_id}"))
                self._chans[(rail_id, a, b)] = ca
                self._chans[(rail_id, b, a)] = cb
                out[a][b] = ca
                out[b][a] = cb
        return out


class InMemoryTransport(Transport):
    kind = "inmem"

    def __init__(self, shared_link: bool = False):
        self.shared_link = shared_link
        self.network: InMemoryNetwork | None = None
        self._lock = threading.Lock()

    def establish(self, rank, world_size, rails):
        with self._lock:
            if self.network is None:
                self.network = InMemoryNetwork(world_size, rails, self.shared_link)
        return self.network.connection_set(rank)


class SocketTransport(Transport):
    """Loopback sockets; shaped per rail profile unless ``shaped`` is False."""

    kind = "shaped"

    def __init__(self, store: FileStore | None = None, *, shaped: bool = True,
                 profile: RailProfile | None = None, timeout: float = 30.0, namespace: str | None = None):
        self.store = store or FileStore()
        self.shaped = shaped
        self.profile = profile
        self.timeout = timeout
        self.namespace = namespace if namespace is not None else uuid.uuid4().hex[:8] + "-"

    def establish(self, rank, world_size, rails):
        if self.profile is not None:
            rails = [self.profile.with_id(r.rail_id) for r in rails]
        return rendezvous(self.store, rank, world_size, rails, shaped=self.shaped,
                          timeout=self.timeout, namespace=self.namespace)


def in_memory_transport(shared_link: bool = False) -> InMemoryTransport:
    return InMemoryTransport(shared_link)


def shaped_transport(profile: RailProfile | None = None, store: FileStore | None = None,
                     **kw) -> SocketTransport:
    """Socket transport shaped by each rail's own profile, or by ``profile`` for all rails."""
    return SocketTransport(store, shaped=True, profile=profile, **kw)


__all__ = [
    "BindError", "Channel", "ChannelDown", "ConnectionSet", "ENV_DIR", "FileStore", "Frame",
    "InMemoryChannel", "InMemoryLink", "InMemoryNetwork", "InMemoryTransport", "MsgType",
    "PhysicalLink", "ProtocolError", "RendezvousTimeout", "SendHandle", "Shaper", "SocketChannel",
    "SocketTransport", "Transport", "TransportError", "decode", "encode", "fragment", "frame_count",
    "in_memory_transport", "rendezvous", "shaped_transport", "sleep_until", "socket_pair", "wait_all",
]
