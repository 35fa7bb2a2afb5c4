"""Incremental graph synchronization with exact byte accounting.

Wire format (little-endian, fixed widths): an 11-byte header (kind u8,
sender u16, sequence u32, payload length u32) followed by the payload.
Graph endpoints travel as 7 bytes: tag u8 (0 history node, 1 region) plus
agent u16 + counter u32 for nodes, or id u32 + zero pad u16 for regions.

Receivers recompute edge weights from the float32 waypoints they received,
which is exactly what the sender stored, so replicas stay bit-identical.
State records merge monotonically (inactive < active < dead); applying them
is idempotent and commutative across senders.
"""

from __future__ import annotations

import heapq
import random
import struct
from dataclasses import dataclass, field

import numpy as np

from .dtg import (
    EroiState,
    HistoryNode,
    MrDtg,
    TopoEdge,
    edge_key,
    eroi_key,
    f32_vec,
    history_key,
    path_weight,
)


class ProtocolError(ValueError):
    """Malformed or out-of-contract wire content."""


class MsgKind:
    NODE_ADD = 1
    EDGE_ADD = 2
    EDGE_DEL = 3
    EROI_STATE = 4
    VIEWPOINT_STATE = 5
    UAV_LINKS = 6
    TARGET_INTENT = 7
    MAP_CHUNK = 8


COOPERATION_KINDS = frozenset({
    MsgKind.NODE_ADD, MsgKind.EDGE_ADD, MsgKind.EDGE_DEL, MsgKind.EROI_STATE,
    MsgKind.VIEWPOINT_STATE, MsgKind.UAV_LINKS, MsgKind.TARGET_INTENT,
})

_HEADER = struct.Struct("<BHII")
HEADER_SIZE = _HEADER.size  # 11

_EP_H = struct.Struct("<BHI")
_EP_E = struct.Struct("<BIH")
_NODE_REC = struct.Struct("<HIfff")
_EROI_STATE_REC = struct.Struct("<IB")
_VP_STATE_REC = struct.Struct("<IBB")
_LINK_TAIL = struct.Struct("<f")
_INTENT_REC = struct.Struct("<IHIf")
_CHUNK_REC = struct.Struct("<IB")
_F32x3 = struct.Struct("<fff")
_U16 = struct.Struct("<H")
_F32 = struct.Struct("<f")

NO_NODE_AGENT = 0xFFFF
MAP_CHUNK_MTU = 1400  # payload bytes per baseline chunk message


@dataclass(frozen=True)
class WireMessage:
    kind: int
    sender: int
    sequence: int
    payload: bytes


def encode_message(kind: int, sender: int, sequence: int, payload) -> bytes:
    n = len(payload)
    if n > 0xFFFFFFFF:
        raise ProtocolError(f"payload of {n} bytes exceeds the length field")
    return _HEADER.pack(kind, sender, sequence, n) + bytes(payload)


def decode_message(data: bytes) -> WireMessage:
    if len(data) < HEADER_SIZE:
        raise ProtocolError("truncated header")
    kind, sender, seq, n = _HEADER.unpack_from(data)
    if len(data) != HEADER_SIZE + n:
        raise ProtocolError("payload length field does not match data size")
    return WireMessage(kind=kind, sender=sender, sequence=seq, payload=data[HEADER_SIZE:])


def _encode_endpoint(key) -> bytes:
    if key[0] == "h":
        return _EP_H.pack(0, key[1], key[2])
    return _EP_E.pack(1, key[1], 0)


def _decode_endpoint(buf: bytes, off: int):
    tag = buf[off]
    if tag == 0:
        _, agent, seq = _EP_H.unpack_from(buf, off)
        return history_key(agent, seq), off + 7
    if tag == 1:
        _, eid, _pad = _EP_E.unpack_from(buf, off)
        return eroi_key(eid), off + 7
    raise ProtocolError(f"unknown endpoint tag {tag}")


# -- payload codecs -------------------------------------------------------------


def encode_node_adds(nodes) -> bytes:
    """nodes: iterable of (key, position)."""
    out = bytearray()
    for key, pos in nodes:
        out += _NODE_REC.pack(key[1], key[2], pos[0], pos[1], pos[2])
    return bytes(out)


def decode_node_adds(payload: bytes):
    if len(payload) % _NODE_REC.size:
        raise ProtocolError("node-add payload not a whole number of records")
    out = []
    for off in range(0, len(payload), _NODE_REC.size):
        agent, seq, x, y, z = _NODE_REC.unpack_from(payload, off)
        out.append((history_key(agent, seq), np.array([x, y, z], dtype=np.float64)))
    return out


def encode_edge_adds(edges) -> bytes:
    out = bytearray()
    for e in edges:
        out += _encode_endpoint(e.key[0])
        out += _encode_endpoint(e.key[1])
        out += _F32.pack(e.weight)
        out += _U16.pack(len(e.path))
        for wp in e.path:
            out += _F32x3.pack(wp[0], wp[1], wp[2])
    return bytes(out)


def decode_edge_adds(payload: bytes):
    """Yields (key, waypoints); weights are recomputed by the receiver."""
    out = []
    off = 0
    while off < len(payload):
        a, off = _decode_endpoint(payload, off)
        b, off = _decode_endpoint(payload, off)
        (_w,) = _F32.unpack_from(payload, off)
        off += 4
        (count,) = _U16.unpack_from(payload, off)
        off += 2
        wps = np.empty((count, 3), dtype=np.float64)
        for i in range(count):
            wps[i] = _F32x3.unpack_from(payload, off)
            off += 12
        out.append((edge_key(a, b), wps))
    if off != len(payload):
        raise ProtocolError("edge-add payload has trailing bytes")
    return out


def encode_edge_dels(keys) -> bytes:
    out = bytearray()
    for key in keys:
        out += _encode_endpoint(key[0])
        out += _encode_endpoint(key[1])
    return bytes(out)


def decode_edge_dels(payload: bytes):
    if len(payload) % 14:
        raise ProtocolError("edge-del payload not a whole number of records")
    out = []
    off = 0
    while off < len(payload):
        a, off = _decode_endpoint(payload, off)
        b, off = _decode_endpoint(payload, off)
        out.append(edge_key(a, b))
    return out


def encode_eroi_states(records) -> bytes:
    return b"".join(_EROI_STATE_REC.pack(eid, st) for eid, st in records)


def decode_eroi_states(payload: bytes):
    if len(payload) % _EROI_STATE_REC.size:
        raise ProtocolError("region-state payload not a whole number of records")
    return [_EROI_STATE_REC.unpack_from(payload, off)
            for off in range(0, len(payload), _EROI_STATE_REC.size)]


def encode_vp_states(records) -> bytes:
    return b"".join(_VP_STATE_REC.pack(eid, idx, st) for eid, idx, st in records)


def decode_vp_states(payload: bytes):
    if len(payload) % _VP_STATE_REC.size:
        raise ProtocolError("viewpoint-state payload not a whole number of records")
    return [_VP_STATE_REC.unpack_from(payload, off)
            for off in range(0, len(payload), _VP_STATE_REC.size)]


def encode_uav_links(links: dict) -> bytes:
    out = bytearray()
    for key, dist in sorted(links.items()):
        out += _encode_endpoint(key)
        out += _LINK_TAIL.pack(dist)
    return bytes(out)


def decode_uav_links(payload: bytes):
    links = {}
    off = 0
    while off < len(payload):
        key, off = _decode_endpoint(payload, off)
        (d,) = _LINK_TAIL.unpack_from(payload, off)
        off += 4
        links[key] = float(d)
    if off != len(payload):
        raise ProtocolError("link payload has trailing bytes")
    return links


def encode_intent(eroi_id: int, node_key, t: float) -> bytes:
    if node_key is None:
        return _INTENT_REC.pack(eroi_id, NO_NODE_AGENT, 0, t)
    return _INTENT_REC.pack(eroi_id, node_key[1], node_key[2], t)


def decode_intent(payload: bytes):
    if len(payload) != _INTENT_REC.size:
        raise ProtocolError("intent payload has the wrong size")
    eid, agent, seq, t = _INTENT_REC.unpack_from(payload)
    node = None if agent == NO_NODE_AGENT else history_key(agent, seq)
    return eid, node, float(t)


def encode_map_chunks(flats, states) -> list[bytes]:
    """Baseline voxel sharing: (u32 linear index, u8 state) records packed
    into payloads of at most MAP_CHUNK_MTU bytes."""
    per = MAP_CHUNK_MTU // _CHUNK_REC.size
    out = []
    for start in range(0, len(flats), per):
        chunk = bytearray()
        for f, s in zip(flats[start:start + per], states[start:start + per]):
            chunk += _CHUNK_REC.pack(int(f), int(s))
        out.append(bytes(chunk))
    return out


def decode_map_chunk(payload: bytes):
    if len(payload) % _CHUNK_REC.size:
        raise ProtocolError("map-chunk payload not a whole number of records")
    return [_CHUNK_REC.unpack_from(payload, off)
            for off in range(0, len(payload), _CHUNK_REC.size)]


# -- deltas ----------------------------------------------------------------------


@dataclass
class GraphDelta:
    """Batched changed elements of one maintenance pass."""

    node_adds: list = field(default_factory=list)  # (key, position)
    eroi_states: list = field(default_factory=list)  # (id, state)
    vp_states: list = field(default_factory=list)  # (id, index, state)
    edge_dels: list = field(default_factory=list)  # edge keys
    edge_adds: list = field(default_factory=list)  # TopoEdge

    def empty(self) -> bool:
        return not (self.node_adds or self.eroi_states or self.vp_states
                    or self.edge_dels or self.edge_adds)

    @classmethod
    def from_changelog(cls, events) -> "GraphDelta":
        """Collapse a maintenance changelog: per element the final op wins,
        so the delta replays the sender's net effect."""
        nodes = {}
        eroi_states = {}
        vp_states = {}
        edge_final = {}
        for ev in events:
            tag = ev[0]
            if tag == "node_add":
                nodes[ev[1]] = ev[2]
            elif tag == "eroi_state":
                eroi_states[ev[1]] = max(eroi_states.get(ev[1], -1), ev[2])
            elif tag == "vp_state":
                vp_states[(ev[1], ev[2])] = max(vp_states.get((ev[1], ev[2]), -1), ev[3])
            elif tag == "edge_add":
                edge_final[ev[1].key] = ("add", ev[1])
            elif tag == "edge_del":
                edge_final[ev[1]] = ("del", None)
        delta = cls()
        delta.node_adds = sorted(nodes.items())
        delta.eroi_states = sorted(eroi_states.items())
        delta.vp_states = sorted((eid, idx, st) for (eid, idx), st in vp_states.items())
        for key in sorted(edge_final):
            op, payload = edge_final[key]
            if op == "add":
                delta.edge_adds.append(payload)
            else:
                delta.edge_dels.append(key)
        return delta

    def to_messages(self, sender: int, seq_iter) -> list[bytes]:
        """One message per non-empty kind, ordered so records referencing
        fresh elements follow the records introducing them."""
        out = []
        if self.node_adds:
            out.append(encode_message(MsgKind.NODE_ADD, sender, next(seq_iter),
                                      encode_node_adds(self.node_adds)))
        if self.eroi_states:
            out.append(encode_message(MsgKind.EROI_STATE, sender, next(seq_iter),
                                      encode_eroi_states(self.eroi_states)))
        if self.vp_states:
            out.append(encode_message(MsgKind.VIEWPOINT_STATE, sender, next(seq_iter),
                                      encode_vp_states(self.vp_states)))
        if self.edge_dels:
            out.append(encode_message(MsgKind.EDGE_DEL, sender, next(seq_iter),
                                      encode_edge_dels(self.edge_dels)))
        if self.edge_adds:
            out.append(encode_message(MsgKind.EDGE_ADD, sender, next(seq_iter),
                                      encode_edge_adds(self.edge_adds)))
        return out


def _validate_eroi_id(dtg: MrDtg, eid: int):
    if eid not in dtg.erois:
        raise ProtocolError(f"region id {eid} outside the pre-partitioned id space")


def apply_message(dtg: MrDtg, msg: WireMessage):
    """Fold one graph message into a replica.

    Validates every record before applying any, so a rejected message leaves
    the replica untouched. Returns the decoded content for the caller.
    """
    if msg.kind == MsgKind.NODE_ADD:
        nodes = decode_node_adds(msg.payload)
        for key, pos in nodes:
            dtg.add_node(HistoryNode(key=key, position=pos, tree=None), record=False)
        return nodes
    if msg.kind == MsgKind.EROI_STATE:
        records = decode_eroi_states(msg.payload)
        for eid, _st in records:
            _validate_eroi_id(dtg, eid)
        for eid, st in records:
            dtg.set_eroi_state(eid, st, record=False)
        return records
    if msg.kind == MsgKind.VIEWPOINT_STATE:
        records = decode_vp_states(msg.payload)
        for eid, idx, _st in records:
            _validate_eroi_id(dtg, eid)
            if idx >= len(dtg.erois[eid].viewpoints) and dtg.erois[eid].total_voxels:
                raise ProtocolError(f"viewpoint index {idx} out of range for region {eid}")
        for eid, idx, st in records:
            if idx < len(dtg.erois[eid].viewpoints):
                dtg.set_vp_state(eid, idx, st, record=False)
        return records
    if msg.kind == MsgKind.EDGE_DEL:
        keys = decode_edge_dels(msg.payload)
        for key in keys:
            for ep in key:
                if ep[0] == "e":
                    _validate_eroi_id(dtg, ep[1])
        for key in keys:
            dtg.del_edge(key, record=False)
        return keys
    if msg.kind == MsgKind.EDGE_ADD:
        decoded = decode_edge_adds(msg.payload)
        for key, _wps in decoded:
            for ep in key:
                if ep[0] == "e":
                    _validate_eroi_id(dtg, ep[1])
        applied = []
        for key, wps in decoded:
            edge = TopoEdge(key=key, path=wps, weight=path_weight(wps), origin=msg.sender)
            if dtg.add_edge(edge, record=False):
                applied.append(edge)
        return applied
    if msg.kind == MsgKind.UAV_LINKS:
        links = decode_uav_links(msg.payload)
        dtg.uav_links[msg.sender] = links
        return links
    raise ProtocolError(f"message kind {msg.kind} is not a replica message")


# -- canonical snapshots ----------------------------------------------------------


def canonical_state(dtg: MrDtg) -> bytes:
    """Deterministic serialization of the shared replica fields, for
    quiescence-equality checks."""
    out = bytearray()
    for key in sorted(dtg.nodes):
        node = dtg.nodes[key]
        out += _NODE_REC.pack(key[1], key[2], node.position[0], node.position[1], node.position[2])
    out += b"|"
    for key in sorted(dtg.edges):
        e = dtg.edges[key]
        out += _encode_endpoint(key[0]) + _encode_endpoint(key[1])
        out += _U16.pack(e.origin)
        out += np.asarray(e.path, dtype="<f4").tobytes()
    out += b"|"
    out += bytes(dtg.erois[eid].state for eid in sorted(dtg.erois))
    out += b"|"
    for eid in sorted(dtg.erois):
        out += bytes(vp.state for vp in dtg.erois[eid].viewpoints)
    return bytes(out)


def replica_diff(a: MrDtg, b: MrDtg) -> list:
    """Human-readable element-level differences between two replicas."""
    diffs = []
    for key in sorted(set(a.nodes) ^ set(b.nodes)):
        diffs.append(("node", key))
    for key in sorted(set(a.edges) ^ set(b.edges)):
        diffs.append(("edge", key))
    for key in sorted(set(a.edges) & set(b.edges)):
        if not np.array_equal(a.edges[key].path, b.edges[key].path):
            diffs.append(("edge_path", key))
    for eid in sorted(a.erois):
        if a.erois[eid].state != b.erois[eid].state:
            diffs.append(("eroi", eid))
        else:
            for i, (va, vb) in enumerate(zip(a.erois[eid].viewpoints, b.erois[eid].viewpoints)):
                if va.state != vb.state:
                    diffs.append(("viewpoint", (eid, i)))
    return diffs


# -- network ----------------------------------------------------------------------


@dataclass
class ByteLedger:
    """Per-recipient-copy byte counters by traffic category, plus single-copy
    counters for sensitivity analysis."""

    cooperation: int = 0
    mapping: int = 0
    cooperation_single: int = 0
    mapping_single: int = 0
    messages: int = 0

    def add(self, kind: int, nbytes: int, recipients: int):
        self.messages += 1
        if kind == MsgKind.MAP_CHUNK:
            self.mapping += nbytes * recipients
            self.mapping_single += nbytes
        else:
            self.cooperation += nbytes * recipients
            self.cooperation_single += nbytes


class NetworkSim:
    """Broadcast fabric between agents: constant or jittered latency, seeded
    drops, per-sender FIFO delivery, optional hex message log."""

    def __init__(self, n_agents: int, latency: float = 0.0, jitter: float = 0.0,
                 drop: float = 0.0, seed: int = 0, keep_log: bool = False):
        self.n_agents = n_agents
        self.latency = latency
        self.jitter = jitter
        self.drop = drop
        self.rng = random.Random(seed)
        self.ledger = ByteLedger()
        self.queue = []  # (deliver_time, order, recipient, data)
        self.dropped = []  # (sender, kind, sequence, recipient)
        self._order = 0
        self._last_delivery = {}
        self.keep_log = keep_log
        self.log = []  # (time, sender, recipients, data)

    def broadcast(self, sender: int, data: bytes, now: float):
        kind = data[0]
        seq = _HEADER.unpack_from(data)[2]
        recipients = [a for a in range(self.n_agents) if a != sender]
        self.ledger.add(kind, len(data), len(recipients))
        if self.keep_log:
            self.log.append((now, sender, tuple(recipients), data))
        for r in recipients:
            if self.drop > 0.0 and self.rng.random() < self.drop:
                self.dropped.append((sender, kind, seq, r))
                continue
            lat = self.latency
            if self.jitter > 0.0:
                lat += self.rng.uniform(0.0, self.jitter)
            t = now + lat
            floor_t = self._last_delivery.get((sender, r))
            if floor_t is not None and t < floor_t:
                t = floor_t  # FIFO per sender-recipient pair
            self._last_delivery[(sender, r)] = t
            heapq.heappush(self.queue, (t, self._order, r, data))
            self._order += 1

    def flush(self, now: float):
        """Everything due by `now`, in delivery order: (recipient, message)."""
        out = []
        while self.queue and self.queue[0][0] <= now + 1e-12:
            _, _, r, data = heapq.heappop(self.queue)
            out.append((r, decode_message(data)))
        return out

    def in_flight(self) -> int:
        return len(self.queue)

    def dump_log(self, path):
        with open(path, "w") as fh:
            for t, sender, recipients, data in self.log:
                rcp = ",".join(str(r) for r in recipients)
                fh.write(f"{t!r} {sender} {rcp} {data.hex()}\n")


def replay_ledger(log_path) -> ByteLedger:
    """Recompute a ledger from a dumped message log (offline audit)."""
    ledger = ByteLedger()
    with open(log_path) as fh:
        for line in fh:
            _t, _sender, rcp, hexdata = line.split()
            data = bytes.fromhex(hexdata)
            ledger.add(data[0], len(data), len(rcp.split(",")))
    return ledger
