"""Coherence controllers: private L1s and the shared LLC.

Controllers are plain state objects whose handlers consume one event and
return the messages it emits.  The simulator drives them with timed
delivery; the checker clones them and explores every delivery order.

Conventions
-----------
* Blocks and word offsets are integers; masks are ints over word offsets.
* Each core has at most one transaction per block, so a transaction is
  identified by (requester, block) and needs no id.
* Every message a requester receives for a transaction round carries the
  same ``expect`` count; the round closes once that many have arrived.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from enum import Enum
from typing import Iterable, Optional

from .selector import RequestType, WordMask
from .trace import AccessKind

R = RequestType
LLC = -1
MAX_FORWARD_RETRIES = 2


class ProtocolError(RuntimeError):
    pass


class Flavor(Enum):
    MESI = "MESI"
    DENOVO = "DeNovo"
    GPU = "GPU"
    FLEX = "Flex"


class WordState(Enum):
    I = "I"
    V = "V"
    S = "S"
    O = "O"


class MsgClass(Enum):
    REQUEST = "Request"
    RESPONSE = "Response"
    NACK = "Nack"
    INVALIDATE = "Invalidate"
    REVOKE = "Revoke"
    ACK = "Ack"


# Fault switches used by the checker's mutation tests.
FAULT_SKIP_REVOKE = "skip_revoke"
FAULT_SKIP_INVALIDATE = "skip_invalidate"
FAULT_DROP_NACK_RETRY = "drop_nack_retry"
FAULTS = (FAULT_SKIP_REVOKE, FAULT_SKIP_INVALIDATE, FAULT_DROP_NACK_RETRY)


def bits(mask: int) -> list[int]:
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


@dataclass(frozen=True)
class Message:
    cls: MsgClass
    src: int
    dst: int
    requester: int
    block: int
    mask: int = 0
    rtype: Optional[RequestType] = None
    need: int = 0
    data: tuple = ()            # ((offset, value), ...)
    expect: int = 1
    nacked: int = 0
    retry: int = 0
    send_data: bool = False
    to_llc: bool = False
    no_forward: bool = False
    delta: int = 0
    pc: int = 0
    depth: int = 1
    pred_target: Optional[int] = None

    @property
    def data_words(self) -> int:
        return len(self.data)

    @cached_property
    def _key(self) -> tuple:
        return (self.cls.value, self.src, self.dst, self.requester, self.block, self.mask,
                self.rtype.value if self.rtype else "", self.need, self.data, self.expect,
                self.nacked, self.retry, self.send_data, self.to_llc, self.no_forward, self.delta)

    def key(self) -> tuple:
        return self._key


# ------------------------------------------------------------- static tables

FLAVOR_TYPES = {
    Flavor.MESI: frozenset({R.ReqS, R.ReqO_data}),
    Flavor.DENOVO: frozenset({R.ReqV, R.ReqO, R.ReqO_data}),
    Flavor.GPU: frozenset({R.ReqV, R.ReqWT, R.ReqWT_data}),
    Flavor.FLEX: frozenset(RequestType),
}


def flavor_static_type(flavor: Flavor, kind: AccessKind) -> tuple[RequestType, bool]:
    """(request type, full-line mask?) a static protocol flavor always uses."""
    if flavor is Flavor.MESI:
        return (R.ReqS if kind is AccessKind.LOAD else R.ReqO_data), True
    if flavor is Flavor.DENOVO:
        if kind is AccessKind.LOAD:
            return R.ReqV, True
        return (R.ReqO if kind is AccessKind.STORE else R.ReqO_data), False
    if flavor is Flavor.GPU:
        if kind is AccessKind.LOAD:
            return R.ReqV, True
        return (R.ReqWT if kind is AccessKind.STORE else R.ReqWT_data), False
    raise ValueError("the Flex flavor has no static type")


def flavor_allows(flavor: Flavor, rtype: RequestType) -> bool:
    return rtype in FLAVOR_TYPES[flavor]


@dataclass(frozen=True)
class Capabilities:
    """What an L1 may issue: forwarding, prediction, word-granular masks."""
    wt_forwarding: bool = True
    owner_prediction: bool = True
    word_granularity: bool = True

    def check(self, rtype: RequestType, mask: int, words_per_block: int) -> Optional[str]:
        if rtype.forwarded and not rtype.predicted and not self.wt_forwarding:
            return f"{rtype.token} needs write-through forwarding"
        if rtype.predicted and not self.owner_prediction:
            return f"{rtype.token} needs owner prediction"
        if rtype.predicted and not self.wt_forwarding and rtype is not R.ReqVo:
            return f"{rtype.token} needs write-through forwarding"
        if not self.word_granularity:
            if mask != (1 << words_per_block) - 1:
                return "line-granularity cache needs full-block masks"
            if rtype is R.ReqO:
                return "line-granularity cache cannot track ReqO without data"
        return None


# ----------------------------------------------------------------- policies

NACKABLE = frozenset({R.ReqV, R.ReqVo, R.ReqWTfwd, R.ReqWTo, R.ReqWTfwd_data, R.ReqWTo_data})


def retry_policy(rtype: RequestType, retry_count: int, cap: int = MAX_FORWARD_RETRIES
                 ) -> tuple[RequestType, bool]:
    """Next (type, no_forward) after a Nack; ``retry_count`` already includes this Nack."""
    if rtype not in NACKABLE:
        raise ProtocolError(f"Nack for non-forwarded request {rtype.token}")
    root = rtype.root
    if retry_count < cap:
        return root, False
    fallback = {R.ReqV: R.ReqV, R.ReqWTfwd: R.ReqWT, R.ReqWTfwd_data: R.ReqWT_data}[root]
    return fallback, fallback is R.ReqV


_WB_PRIORITY = {R.ReqWT: 4, R.ReqO_data: 3, R.ReqO: 3, R.ReqWTfwd: 2, R.ReqWTo: 1}


def coalesce_type(a: RequestType, b: RequestType) -> RequestType:
    if {a, b} == {R.ReqO, R.ReqO_data}:
        return R.ReqO_data
    return a if _WB_PRIORITY[a] >= _WB_PRIORITY[b] else b


@dataclass
class WBEntry:
    block: int
    rtype: RequestType
    mask: int
    data: dict = field(default_factory=dict)   # offset -> value
    pc: int = 0
    seqs: list = field(default_factory=list)


class WriteBuffer:
    """Pending store misses, coalesced per block in arrival order."""

    def __init__(self, capacity: int = 64):
        self.capacity = capacity
        self.entries: "OrderedDict[int, WBEntry]" = OrderedDict()

    def __len__(self) -> int:
        return len(self.entries)

    def coalesce(self, block: int, rtype: RequestType, mask: int, data: dict, pc: int, seq=None) -> WBEntry:
        e = self.entries.get(block)
        if e is None:
            e = self.entries[block] = WBEntry(block, rtype, mask, dict(data), pc, [])
        else:
            e.rtype = coalesce_type(e.rtype, rtype)
            e.mask |= mask
            e.data.update(data)
        if seq is not None:
            e.seqs.append(seq)
        return e

    def lookup(self, block: int, off: int):
        e = self.entries.get(block)
        if e is not None and off in e.data:
            return e.data[off]
        return None

    def pop(self, block: int) -> WBEntry:
        return self.entries.pop(block)

    def over_capacity(self) -> bool:
        return len(self.entries) > self.capacity


def write_buffer_coalesce(entries: list[WBEntry], block: int, rtype: RequestType, mask: int,
                          data: dict) -> list[WBEntry]:
    """Functional form of coalescing used in tests and documentation."""
    wb = WriteBuffer()
    for e in entries:
        wb.entries[e.block] = WBEntry(e.block, e.rtype, e.mask, dict(e.data), e.pc, list(e.seqs))
    wb.coalesce(block, rtype, mask, data, 0)
    return list(wb.entries.values())


def predict_owner(table: dict, static_inst_id: int, root: RequestType) -> Optional[int]:
    return table.get((static_inst_id, root))


def update_prediction(table: dict, static_inst_id: int, root: RequestType, responder: Optional[int]) -> dict:
    out = dict(table)
    out[(static_inst_id, root)] = responder
    return out


def fetch_add(old: int, delta: int, modulus: Optional[int]) -> int:
    new = old + delta
    return new % modulus if modulus else new


# ---------------------------------------------------------------- transactions

@dataclass
class Txn:
    core: int
    block: int
    kind: AccessKind
    rtype: RequestType
    orig: RequestType
    mask: int
    need: int
    pc: int = 0
    want: int = 0                               # words the access itself needs
    data: dict = field(default_factory=dict)    # store payload, offset -> value
    delta: int = 0
    retry: int = 0
    no_forward: bool = False
    target: Optional[int] = None                # direct send for predicted types
    expect: Optional[int] = None
    received: int = 0
    got: dict = field(default_factory=dict)     # offset -> value
    nacked: int = 0
    responder: Optional[int] = None
    depth: int = 0
    old_value: Optional[int] = None
    inv_raced: bool = False
    start: int = 0
    seqs: tuple = ()
    sync: bool = False
    log: list = field(default_factory=list)     # per round: (type, predicted, hit, legs)

    @property
    def ownership(self) -> bool:
        return self.rtype in (R.ReqO, R.ReqO_data)

    @property
    def predicted(self) -> bool:
        return self.target is not None

    def clone(self) -> "Txn":
        c = object.__new__(Txn)
        c.__dict__.update(self.__dict__)
        c.data, c.got, c.log = dict(self.data), dict(self.got), list(self.log)
        return c

    def key(self) -> tuple:
        return (self.kind.value, self.rtype.value, self.mask, self.need, tuple(sorted(self.data.items())),
                self.delta, self.retry, self.no_forward, self.target, self.expect, self.received,
                tuple(sorted(self.got.items())), self.nacked, self.old_value, self.inv_raced, self.sync)


@dataclass
class Completion:
    txn: Txn
    values: dict            # offset -> value observed (loads) or written
    legs: int


# ------------------------------------------------------------------------ L1

class L1Controller:
    def __init__(self, core: int, words_per_block: int, flavor: Flavor = Flavor.FLEX,
                 caps: Capabilities = Capabilities(), faults: frozenset = frozenset(),
                 modulus: Optional[int] = None):
        self.core = core
        self.wpb = words_per_block
        self.flavor = flavor
        self.caps = caps
        self.faults = faults
        self.modulus = modulus
        self.words: dict[tuple[int, int], tuple[WordState, int]] = {}
        self.txns: dict[int, Txn] = {}
        self.deferred: dict[int, list[Message]] = {}
        self.pred_table: dict = {}
        self.pred_busy: set = set()

    # -- state helpers
    def clone(self) -> "L1Controller":
        c = L1Controller.__new__(L1Controller)
        c.core, c.wpb, c.flavor, c.caps, c.faults, c.modulus = (
            self.core, self.wpb, self.flavor, self.caps, self.faults, self.modulus)
        c.words = dict(self.words)
        c.txns = {b: t.clone() for b, t in self.txns.items()}
        c.deferred = {b: list(v) for b, v in self.deferred.items()}
        c.pred_table = dict(self.pred_table)
        c.pred_busy = set(self.pred_busy)
        return c

    def key(self) -> tuple:
        return (tuple(sorted((k, s.value, v) for k, (s, v) in self.words.items())),
                tuple(sorted((b, t.key()) for b, t in self.txns.items())),
                tuple(sorted((b, tuple(sorted(m.key() for m in v))) for b, v in self.deferred.items() if v)))

    def state(self, block: int, off: int) -> WordState:
        e = self.words.get((block, off))
        return e[0] if e else WordState.I

    def value(self, block: int, off: int) -> Optional[int]:
        e = self.words.get((block, off))
        return e[1] if e else None

    def owns(self, block: int, off: int) -> bool:
        return self.state(block, off) is WordState.O

    def owned_mask(self, block: int, mask: int) -> int:
        m = 0
        for off in bits(mask):
            if self.owns(block, off):
                m |= 1 << off
        return m

    def readable(self, block: int, offs: Iterable[int]) -> bool:
        return all(self.state(block, o) is not WordState.I for o in offs)

    def _set(self, block: int, off: int, st: WordState, val: int) -> None:
        if st is WordState.I:
            self.words.pop((block, off), None)
        else:
            self.words[(block, off)] = (st, val)

    def local_write(self, block: int, off: int, val: int) -> None:
        if not self.owns(block, off):
            raise ProtocolError("local write without ownership")
        self.words[(block, off)] = (WordState.O, val)

    def local_rmw(self, block: int, off: int, delta: int) -> int:
        old = self.value(block, off)
        self.local_write(block, off, fetch_add(old, delta, self.modulus))
        return old

    def self_invalidate(self, block: Optional[int] = None) -> int:
        """Drop Valid words at an acquire (optionally of one block only);
        Shared and Owned words survive."""
        drop = [k for k, (s, _) in self.words.items()
                if s is WordState.V and (block is None or k[0] == block)]
        for k in drop:
            del self.words[k]
        return len(drop)

    def has_pending_ownership(self, block: int) -> bool:
        t = self.txns.get(block)
        return t is not None and t.ownership

    # -- issuing
    def start(self, txn: Txn) -> list[Message]:
        if txn.block in self.txns:
            raise ProtocolError(f"core {self.core} already has a transaction on block {txn.block}")
        err = self.caps.check(txn.rtype, txn.mask, self.wpb)
        if err:
            raise ProtocolError(f"core {self.core}: {err}")
        txn.want = txn.want or txn.need
        if txn.rtype is R.ReqO and any(o not in txn.data for o in bits(txn.mask)):
            txn.rtype = R.ReqO_data
        self.txns[txn.block] = txn
        return [self._request(txn)]

    def _request(self, txn: Txn) -> Message:
        txn.expect, txn.received, txn.nacked, txn.depth = None, 0, 0, 0
        payload = ()
        if txn.kind is AccessKind.STORE:
            payload = tuple(sorted(txn.data.items())) if not txn.ownership else ()
        dst = txn.target if txn.target is not None else LLC
        return Message(MsgClass.REQUEST, self.core, dst, self.core, txn.block, txn.mask, txn.rtype,
                       txn.need, payload, retry=txn.retry, no_forward=txn.no_forward, delta=txn.delta,
                       pc=txn.pc, depth=1, pred_target=txn.target)

    # -- receiving
    def handle(self, msg: Message) -> tuple[list[Message], list[Completion]]:
        if msg.cls is MsgClass.REQUEST:
            return self._serve_forward(msg), []
        if msg.cls is MsgClass.INVALIDATE:
            return self._invalidate(msg), []
        if msg.cls is MsgClass.REVOKE:
            return self._revoke(msg), []
        return self._response(msg)

    def _defer(self, msg: Message) -> list[Message]:
        self.deferred.setdefault(msg.block, []).append(msg)
        return []

    def _serve_forward(self, msg: Message) -> list[Message]:
        b = msg.block
        rt = msg.rtype
        owned = self.owned_mask(b, msg.mask)
        if msg.need & ~owned and self.has_pending_ownership(b):
            return self._defer(msg)
        nacked = msg.need & ~owned
        data: list = []
        if rt in (R.ReqV, R.ReqVo):
            # answer with every word of the line we own, not just the requested ones
            if owned:
                owned_line = self.owned_mask(b, (1 << self.wpb) - 1)
                data = [(o, self.value(b, o)) for o in bits(owned_line)]
        elif rt in (R.ReqWTfwd, R.ReqWTo):
            for o, v in msg.data:
                if owned >> o & 1:
                    self.local_write(b, o, v)
        elif rt in (R.ReqWTfwd_data, R.ReqWTo_data):
            for o in bits(msg.need & owned):
                data.append((o, self.local_rmw(b, o, msg.delta)))
        else:
            raise ProtocolError(f"cannot serve {rt.token} at an L1")
        served = msg.need & owned
        if not served and not (owned and not msg.need):
            cls = MsgClass.NACK
        elif rt in (R.ReqWTfwd, R.ReqWTo):
            cls = MsgClass.ACK
        else:
            cls = MsgClass.RESPONSE
        return [Message(cls, self.core, msg.requester, msg.requester, b, msg.mask, rt, msg.need,
                        tuple(data), msg.expect, nacked, depth=msg.depth + 1)]

    def _invalidate(self, msg: Message) -> list[Message]:
        b = msg.block
        for o in range(self.wpb):
            if self.state(b, o) is WordState.S:
                self._set(b, o, WordState.I, 0)
        t = self.txns.get(b)
        if t is not None and t.rtype is R.ReqS:
            # the pending shared fill may predate this write; use it once, do not keep it
            t.inv_raced = True
        return [Message(MsgClass.ACK, self.core, msg.requester, msg.requester, b, msg.mask,
                        expect=msg.expect, depth=msg.depth + 1)]

    def _revoke(self, msg: Message) -> list[Message]:
        b = msg.block
        owned = self.owned_mask(b, msg.mask)
        if owned != msg.mask and self.has_pending_ownership(b):
            return self._defer(msg)
        data = []
        for o in bits(owned):
            if msg.send_data:
                data.append((o, self.value(b, o)))
            self._set(b, o, WordState.I, 0)
        dst = LLC if msg.to_llc else msg.requester
        return [Message(MsgClass.ACK, self.core, dst, msg.requester, b, msg.mask, msg.rtype,
                        data=tuple(data), expect=msg.expect, to_llc=msg.to_llc, depth=msg.depth + 1)]

    def _response(self, msg: Message) -> tuple[list[Message], list[Completion]]:
        b = msg.block
        t = self.txns.get(b)
        if t is None:
            raise ProtocolError(f"core {self.core}: unexpected {msg.cls.value} for block {b}")
        if msg.cls is MsgClass.NACK and t.rtype not in NACKABLE:
            raise ProtocolError(f"Nack for non-forwarded request {t.rtype.token}")
        for o, v in msg.data:
            t.got[o] = v
        t.nacked |= msg.nacked
        t.received += 1
        t.depth = max(t.depth, msg.depth)
        if t.expect is None:
            t.expect = msg.expect
        elif t.expect != msg.expect:
            raise ProtocolError("inconsistent expect counts within one round")
        if msg.src != LLC and (msg.need & ~msg.nacked):
            t.responder = msg.src
        if t.received < t.expect:
            return [], []
        return self._close_round(t)

    def _close_round(self, t: Txn) -> tuple[list[Message], list[Completion]]:
        missed = t.nacked & t.need
        t.log.append((t.rtype, t.predicted, not missed, t.depth))
        if missed:
            if FAULT_DROP_NACK_RETRY in self.faults:
                return [], []
            t.retry += 1
            t.rtype, t.no_forward = retry_policy(t.rtype, t.retry)
            t.target = None
            t.need = missed
            t.mask = missed
            if t.kind is AccessKind.STORE:
                t.data = {o: v for o, v in t.data.items() if missed >> o & 1}
            return [self._request(t)], []
        return self._finish(t)

    def _finish(self, t: Txn) -> tuple[list[Message], list[Completion]]:
        b = t.block
        values: dict = {}
        if t.kind is AccessKind.LOAD or (t.kind is AccessKind.RMW and t.ownership):
            if t.ownership:
                for o in bits(t.mask):
                    if self.owns(b, o):
                        continue
                    if o not in t.got:
                        raise ProtocolError(f"ownership grant for offset {o} without data")
                    self._set(b, o, WordState.O, t.got[o])
            else:
                st = WordState.S if t.rtype is R.ReqS else WordState.V
                for o, v in t.got.items():
                    if self.owns(b, o):
                        continue
                    if t.inv_raced:
                        continue
                    self._set(b, o, st, v)
            for o in bits(t.want):
                values[o] = self.value(b, o) if self.owns(b, o) else t.got.get(o)
            if t.kind is AccessKind.RMW:
                (o,) = bits(t.want)
                t.old_value = self.local_rmw(b, o, t.delta)
                values = {o: t.old_value}
        elif t.kind is AccessKind.STORE:
            if t.ownership:
                for o in bits(t.mask):
                    if o in t.data:
                        self._set(b, o, WordState.O, t.data[o])
                    elif self.owns(b, o):
                        continue
                    elif o in t.got:
                        self._set(b, o, WordState.O, t.got[o])
                    else:
                        raise ProtocolError(f"ownership grant for offset {o} without data")
            else:
                for o, v in t.data.items():
                    if not self.owns(b, o):
                        self._set(b, o, WordState.V, v)
            values = dict(t.data)
        else:
            (o,) = bits(t.want)
            t.old_value = t.got.get(o)
            values = {o: t.old_value}
            if not self.owns(b, o):
                # the atomic was performed remotely; any local copy is now stale
                self._set(b, o, WordState.I, 0)
        if t.orig.predicted:
            self.pred_table[(t.pc, t.orig.root)] = t.responder
            self.pred_busy.discard((t.pc, t.orig.root))
        del self.txns[b]
        out: list[Message] = []
        comps = [Completion(t, values, t.depth)]
        for m in self.deferred.pop(b, []):
            more, done = self.handle(m)
            out.extend(more)
            comps.extend(done)
        return out, comps


# ----------------------------------------------------------------------- LLC

@dataclass
class _Transient:
    kind: str               # "S", "V" or "WTD"
    msg: Message
    waiting: set
    expect: int = 1

    def clone(self) -> "_Transient":
        return _Transient(self.kind, self.msg, set(self.waiting), self.expect)

    def key(self) -> tuple:
        return (self.kind, self.msg.key(), tuple(sorted(self.waiting)), self.expect)


class LLCController:
    def __init__(self, words_per_block: int, faults: frozenset = frozenset(), modulus: Optional[int] = None):
        self.wpb = words_per_block
        self.faults = faults
        self.modulus = modulus
        self.owner: dict[tuple[int, int], int] = {}
        self.values: dict[tuple[int, int], int] = {}
        self.sharers: dict[int, frozenset] = {}
        self.transient: dict[int, _Transient] = {}
        self.queue: dict[int, list[Message]] = {}
        self.lookups = 0

    def clone(self) -> "LLCController":
        c = LLCController.__new__(LLCController)
        c.wpb, c.faults, c.modulus = self.wpb, self.faults, self.modulus
        c.owner = dict(self.owner)
        c.values = dict(self.values)
        c.sharers = dict(self.sharers)
        c.transient = {b: t.clone() for b, t in self.transient.items()}
        c.queue = {b: list(q) for b, q in self.queue.items()}
        c.lookups = self.lookups
        return c

    def key(self) -> tuple:
        return (tuple(sorted(self.owner.items())), tuple(sorted(self.values.items())),
                tuple(sorted((b, tuple(sorted(s))) for b, s in self.sharers.items() if s)),
                tuple(sorted((b, t.key()) for b, t in self.transient.items())),
                tuple(sorted((b, tuple(m.key() for m in q)) for b, q in self.queue.items() if q)))

    def value(self, block: int, off: int) -> int:
        return self.values.get((block, off), 0)

    def owner_of(self, block: int, off: int) -> Optional[int]:
        return self.owner.get((block, off))

    def _group_owned(self, block: int, mask: int, exclude: int) -> dict[int, int]:
        groups: dict[int, int] = {}
        for o in bits(mask):
            w = self.owner.get((block, o))
            if w is not None and w != exclude:
                groups[w] = groups.get(w, 0) | 1 << o
        return groups

    def _invalidate_sharers(self, b: int, req: int) -> list[int]:
        if FAULT_SKIP_INVALIDATE in self.faults:
            return []
        others = sorted(self.sharers.get(b, frozenset()) - {req})
        if others:
            self.sharers[b] = self.sharers[b] & {req}
        return others

    def handle(self, msg: Message) -> list[Message]:
        if msg.cls is MsgClass.ACK and msg.to_llc:
            return self._recall_data(msg)
        if msg.cls is not MsgClass.REQUEST:
            raise ProtocolError(f"LLC cannot handle {msg.cls.value}")
        if msg.block in self.transient:
            self.queue.setdefault(msg.block, []).append(msg)
            return []
        self.lookups += 1
        return self._request(msg)

    def _reply(self, cls: MsgClass, msg: Message, data: dict, expect: int, mask: Optional[int] = None) -> Message:
        return Message(cls, LLC, msg.requester, msg.requester, msg.block,
                       msg.mask if mask is None else mask, msg.rtype, msg.need,
                       tuple(sorted(data.items())), expect, depth=msg.depth + 1)

    def _start_recall(self, kind: str, msg: Message, groups: dict[int, int], expect: int = 1) -> list[Message]:
        self.transient[msg.block] = _Transient(kind, msg, set(groups), expect)
        return [Message(MsgClass.REVOKE, LLC, o, msg.requester, msg.block, m, msg.rtype, send_data=True,
                        to_llc=True, depth=msg.depth + 1) for o, m in sorted(groups.items())]

    def _request(self, msg: Message) -> list[Message]:
        b, req, rt = msg.block, msg.requester, msg.rtype
        full = (1 << self.wpb) - 1
        if rt is R.ReqV:
            groups = self._group_owned(b, msg.mask, req)
            if groups and msg.no_forward:
                return self._start_recall("V", msg, groups)
            return self._serve_v(msg, groups)
        if rt is R.ReqS:
            groups = self._group_owned(b, full, req)
            if groups:
                return self._start_recall("S", msg, groups)
            return self._serve_s(msg)
        if rt in (R.ReqO, R.ReqO_data):
            return self._serve_o(msg)
        if rt in (R.ReqWT, R.ReqWTfwd):
            return self._serve_wt(msg, forward=rt is R.ReqWTfwd)
        if rt in (R.ReqWT_data, R.ReqWTfwd_data):
            return self._serve_wt_data(msg, forward=rt is R.ReqWTfwd_data)
        raise ProtocolError(f"LLC cannot serve {rt.token}")

    def _serve_v(self, msg: Message, groups: dict[int, int]) -> list[Message]:
        b, req = msg.block, msg.requester
        data = {o: self.value(b, o) for o in bits(msg.mask)
                if self.owner.get((b, o)) is None}
        send_resp = bool(data) or not groups
        expect = len(groups) + (1 if send_resp else 0)
        out = [Message(MsgClass.REQUEST, LLC, o, req, b, m, R.ReqV, msg.need & m, expect=expect,
                       retry=msg.retry, pc=msg.pc, depth=msg.depth + 1) for o, m in sorted(groups.items())]
        if send_resp:
            out.append(self._reply(MsgClass.RESPONSE, msg, data, expect))
        return out

    def _serve_s(self, msg: Message) -> list[Message]:
        b, req = msg.block, msg.requester
        self.sharers[b] = self.sharers.get(b, frozenset()) | {req}
        data = {o: self.value(b, o) for o in range(self.wpb) if self.owner.get((b, o)) is None}
        return [self._reply(MsgClass.RESPONSE, msg, data, 1)]

    def _serve_o(self, msg: Message) -> list[Message]:
        b, req = msg.block, msg.requester
        invs = self._invalidate_sharers(b, req)
        groups = self._group_owned(b, msg.mask, req)
        skip = FAULT_SKIP_REVOKE in self.faults
        if skip:
            groups = {}
        with_data = msg.rtype is R.ReqO_data
        data = {}
        for o in bits(msg.mask):
            if with_data and (skip or self.owner.get((b, o)) is None):
                data[o] = self.value(b, o)
            self.owner[(b, o)] = req
        send_resp = bool(data) or not (invs or groups)
        expect = len(invs) + len(groups) + (1 if send_resp else 0)
        out = [Message(MsgClass.INVALIDATE, LLC, s, req, b, msg.mask, expect=expect, depth=msg.depth + 1)
               for s in invs]
        out += [Message(MsgClass.REVOKE, LLC, o, req, b, m, msg.rtype, send_data=with_data, expect=expect,
                        depth=msg.depth + 1) for o, m in sorted(groups.items())]
        if send_resp:
            out.append(self._reply(MsgClass.RESPONSE, msg, data, expect))
        return out

    def _serve_wt(self, msg: Message, forward: bool) -> list[Message]:
        b, req = msg.block, msg.requester
        written = 0
        for o, _ in msg.data:
            written |= 1 << o
        groups = self._group_owned(b, written, req)
        fwd = groups if forward else {}
        at_llc = written & ~sum(fwd.values())
        revokes = {} if forward else groups
        if FAULT_SKIP_REVOKE in self.faults:
            revokes = {}
        invs = self._invalidate_sharers(b, req) if at_llc else []
        for o, v in msg.data:
            if at_llc >> o & 1:
                if self.owner.get((b, o)) == req:
                    raise ProtocolError("write-through from the recorded owner")
                self.owner.pop((b, o), None)
                self.values[(b, o)] = v
        send_resp = not (invs or revokes or fwd)
        expect = len(invs) + len(revokes) + len(fwd) + (1 if send_resp else 0)
        out = [Message(MsgClass.INVALIDATE, LLC, s, req, b, at_llc, expect=expect, depth=msg.depth + 1)
               for s in invs]
        out += [Message(MsgClass.REVOKE, LLC, o, req, b, m, msg.rtype, expect=expect, depth=msg.depth + 1)
                for o, m in sorted(revokes.items())]
        for o, m in sorted(fwd.items()):
            payload = tuple((w, v) for w, v in msg.data if m >> w & 1)
            out.append(Message(MsgClass.REQUEST, LLC, o, req, b, m, R.ReqWTfwd, msg.need & m, payload,
                               expect=expect, retry=msg.retry, pc=msg.pc, depth=msg.depth + 1))
        if send_resp:
            out.append(self._reply(MsgClass.ACK, msg, {}, expect))
        return out

    def _serve_wt_data(self, msg: Message, forward: bool) -> list[Message]:
        b, req = msg.block, msg.requester
        (o,) = bits(msg.need)
        owner = self.owner.get((b, o))
        if owner is not None and owner != req and forward:
            return [Message(MsgClass.REQUEST, LLC, owner, req, b, 1 << o, R.ReqWTfwd_data, msg.need,
                            expect=1, retry=msg.retry, delta=msg.delta, pc=msg.pc, depth=msg.depth + 1)]
        if owner == req:
            raise ProtocolError("write-through atomic from the recorded owner")
        invs = self._invalidate_sharers(b, req)
        out = [Message(MsgClass.INVALIDATE, LLC, s, req, b, 1 << o, expect=len(invs) + 1, depth=msg.depth + 1)
               for s in invs]
        if owner is not None and FAULT_SKIP_REVOKE not in self.faults:
            return out + self._start_recall("WTD", msg, {owner: 1 << o}, expect=len(invs) + 1)
        if owner is not None:
            self.owner.pop((b, o))
        return out + [self._apply_rmw(msg, len(invs) + 1)]

    def _apply_rmw(self, msg: Message, expect: int) -> Message:
        b = msg.block
        (o,) = bits(msg.need)
        old = self.value(b, o)
        self.values[(b, o)] = fetch_add(old, msg.delta, self.modulus)
        return self._reply(MsgClass.RESPONSE, msg, {o: old}, expect)

    def _recall_data(self, msg: Message) -> list[Message]:
        b = msg.block
        tr = self.transient.get(b)
        if tr is None or msg.src not in tr.waiting:
            raise ProtocolError(f"unexpected recall data for block {b}")
        for o, v in msg.data:
            self.values[(b, o)] = v
        for o in bits(msg.mask):
            if self.owner.get((b, o)) == msg.src:
                del self.owner[(b, o)]
        tr.waiting.discard(msg.src)
        if tr.waiting:
            return []
        del self.transient[b]
        orig = tr.msg
        if tr.kind == "S":
            out = self._serve_s(orig)
        elif tr.kind == "V":
            out = self._serve_v(orig, {})
        else:
            out = [self._apply_rmw(orig, tr.expect)]
        q = self.queue.pop(b, [])
        while q:
            m = q.pop(0)
            out += self.handle(m)
            if b in self.transient:
                self.queue[b] = self.queue.get(b, []) + q
                break
        return out
