"""Bootstrap: publish per-(rank, rail) listen addresses, then build the channel mesh."""
from __future__ import annotations

import json
import os
import socket
import tempfile
import time
from pathlib import Path
from typing import Iterable, Sequence

from ..core import RailProfile
from .channel import Channel
from .frame import BindError, Frame, MsgType, ProtocolError, RendezvousTimeout, HEADER_SIZE, decode_header
from .shaping import PhysicalLink, Shaper
from .sockets import SocketChannel, _recv_exact

ENV_DIR = "NEZHA_RENDEZVOUS_DIR"


def default_store_dir() -> Path:
    env = os.environ.get(ENV_DIR)
    if env:
        return Path(env)
    return Path(tempfile.gettempdir()) / "nezha-rendezvous"


class FileStore:
    """Key-value exchange over a shared directory of small JSON files."""

    def __init__(self, path: str | os.PathLike | None = None, poll_interval: float = 0.005):
        self.path = Path(path) if path is not None else default_store_dir()
        self.path.mkdir(parents=True, exist_ok=True)
        self.poll_interval = poll_interval

    def _file(self, key: str) -> Path:
        return self.path / f"{key}.json"

    def set(self, key: str, value) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.path, prefix=".tmp-")
        with os.fdopen(fd, "w") as fh:
            json.dump(value, fh)
        os.replace(tmp, self._file(key))

    def get(self, key: str, default=None):
        try:
            with open(self._file(key)) as fh:
                return json.load(fh)
        except FileNotFoundError:
            return default

    def wait(self, keys: Iterable[str], timeout: float) -> dict:
        keys = list(keys)
        deadline = time.monotonic() + timeout
        found: dict = {}
        while True:
            for k in keys:
                if k not in found:
                    v = self.get(k)
                    if v is not None:
                        found[k] = v
            if len(found) == len(keys):
                return found
            if time.monotonic() > deadline:
                missing = sorted(set(keys) - set(found))
                raise RendezvousTimeout(f"timed out waiting for {missing}")
            time.sleep(self.poll_interval)

    def clear(self) -> None:
        for p in self.path.glob("*.json"):
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def record_key(rank: int, rail: int) -> str:
    return f"rank{rank}-rail{rail}"


class ConnectionSet:
    """All channels of one rank, keyed by (rail_id, peer_rank)."""

    def __init__(self, rank: int, world_size: int, rails: Sequence[RailProfile],
                 channels: dict[tuple[int, int], Channel]):
        self.rank = rank
        self.world_size = world_size
        self.rails = list(rails)
        self.channels = dict(sorted(channels.items()))

    def __len__(self):
        return len(self.channels)

    def ordered(self) -> list[Channel]:
        return list(self.channels.values())

    @property
    def rail_ids(self) -> list[int]:
        return [r.rail_id for r in self.rails]

    def profile(self, rail_id: int) -> RailProfile:
        for r in self.rails:
            if r.rail_id == rail_id:
                return r
        raise KeyError(rail_id)

    def rail(self, rail_id: int) -> dict[int, Channel]:
        """peer_rank -> channel for one rail."""
        return {p: ch for (r, p), ch in self.channels.items() if r == rail_id}

    def channel(self, rail_id: int, peer: int) -> Channel:
        return self.channels[(rail_id, peer)]

    def replace_rail(self, rail_id: int, channels: dict[int, Channel]) -> None:
        for peer, ch in channels.items():
            self.channels[(rail_id, peer)] = ch
        self.channels = dict(sorted(self.channels.items()))

    def fail_rail(self, rail_id: int) -> None:
        """Abruptly close every channel of one rail (NIC failure emulation)."""
        for ch in self.rail(rail_id).values():
            ch.close()

    def close(self) -> None:
        for ch in self.channels.values():
            ch.close()

    def counters(self, rail_id: int | None = None) -> dict[str, int]:
        chans = self.ordered() if rail_id is None else list(self.rail(rail_id).values())
        return {
            "frames_sent": sum(c.frames_sent for c in chans),
            "bytes_sent": sum(c.bytes_sent for c in chans),
            "payload_bytes_sent": sum(c.payload_bytes_sent for c in chans),
        }


def _listen(host: str, port: int, backlog: int) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        srv.bind((host, port))
    except OSError as exc:
        srv.close()
        raise BindError(f"cannot bind {host}:{port}: {exc}") from exc
    srv.listen(backlog)
    return srv


def _tune(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


def rendezvous(store: FileStore, rank: int, world_size: int, rails: Sequence[RailProfile], *,
               shaped: bool = True, host: str = "127.0.0.1", port: int = 0,
               timeout: float = 30.0, namespace: str = "") -> ConnectionSet:
    """Connect this rank to every peer on every rail.

    Each (rank, rail) publishes a listen address; the higher rank of each
    pair dials the lower one and identifies itself with a handshake frame.
    """
    if world_size < 2:
        raise ValueError("rendezvous needs world_size >= 2")
    if not 0 <= rank < world_size:
        raise ValueError(f"rank {rank} outside world of {world_size}")
    rail_ids = [r.rail_id for r in rails]
    if len(set(rail_ids)) != len(rail_ids):
        raise ValueError("duplicate rail ids")

    listeners = {}
    try:
        for r in rails:
            srv = _listen(host, port, world_size)
            srv.settimeout(timeout)
            listeners[r.rail_id] = srv
            addr = "%s:%d" % srv.getsockname()[:2]
            store.set(namespace + record_key(rank, r.rail_id),
                      {"rank": rank, "rail": r.rail_id, "addr": addr})
        keys = [namespace + record_key(p, r.rail_id) for p in range(world_size) for r in rails]
        records = store.wait(keys, timeout)

        socks: dict[tuple[int, int], socket.socket] = {}
        # dial lower ranks; connect() completes against the listen backlog
        for r in rails:
            for peer in range(rank):
                rec = records[namespace + record_key(peer, r.rail_id)]
                h, p = rec["addr"].rsplit(":", 1)
                s = socket.create_connection((h, int(p)), timeout=timeout)
                _tune(s)
                s.sendall(Frame(MsgType.HEALTH, rank, r.rail_id).header())
                socks[(r.rail_id, peer)] = s
        # accept higher ranks
        for r in rails:
            srv = listeners[r.rail_id]
            for _ in range(rank + 1, world_size):
                try:
                    s, _addr = srv.accept()
                except socket.timeout as exc:
                    raise RendezvousTimeout("timed out accepting peers") from exc
                s.settimeout(timeout)
                _tune(s)
                mtype, peer, rail, _, _ = decode_header(_recv_exact(s, HEADER_SIZE))
                if mtype != MsgType.HEALTH or rail != r.rail_id or not rank < peer < world_size:
                    raise ProtocolError(f"bad handshake from {_addr}")
                socks[(r.rail_id, peer)] = s
    finally:
        for srv in listeners.values():
            srv.close()

    # one physical link (token bucket) per (rail, peer) direction
    channels: dict[tuple[int, int], Channel] = {}
    for (rail_id, peer), s in socks.items():
        s.settimeout(None)
        prof = next(r for r in rails if r.rail_id == rail_id)
        shaper = Shaper(prof, PhysicalLink(prof.bandwidth, f"rail{rail_id}:{rank}->{peer}")) if shaped else None
        channels[(rail_id, peer)] = SocketChannel(rank, peer, rail_id, s, shaper)
    return ConnectionSet(rank, world_size, rails, channels)


def socket_pair(rail: RailProfile, *, shaped: bool = True, link: PhysicalLink | None = None,
                ranks=(0, 1)) -> tuple[SocketChannel, SocketChannel]:
    """Two connected loopback channels; ``link`` may be shared to model virtual channels."""
    srv = _listen("127.0.0.1", 0, 1)
    a = socket.create_connection(srv.getsockname())
    b, _ = srv.accept()
    srv.close()
    _tune(a)
    _tune(b)
    sa = Shaper(rail, link) if shaped else None
    sb = Shaper(rail, PhysicalLink(rail.bandwidth)) if shaped else None
    ca = SocketChannel(ranks[0], ranks[1], rail.rail_id, a, sa, link.link_id if link else None)
    cb = SocketChannel(ranks[1], ranks[0], rail.rail_id, b, sb)
    return ca, cb
