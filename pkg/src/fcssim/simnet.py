"""Trace-driven, deterministic discrete-event harness around the controllers.

Cores replay their slice of the trace in program order.  Cross-core order is
imposed only through synchronization: an acquire may not start until every
release that precedes it in the trace has completed.  Messages travel a 4x4
mesh with a fixed per-hop cost; the LLC sits on one tile.
"""
from __future__ import annotations

import csv
import heapq
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .coherence import (LLC, Capabilities, Completion, Flavor, LLCController, L1Controller, Message,
                        MsgClass, ProtocolError, Txn, WriteBuffer, bits, flavor_static_type)
from .selector import (HardwareProfile, RequestType, ScoringParams, SelectionMap, WordMask,
                       select_all)
from .trace import AccessKind, AccessTrace, DeviceClass, MemoryAccess

R = RequestType


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    name: str = "custom"
    flavors: tuple = ((DeviceClass.CPU, Flavor.FLEX), (DeviceClass.GPU, Flavor.FLEX))
    enable_wt_forwarding: bool = True
    enable_owner_prediction: bool = True
    hop_latency: int = 8
    llc_latency: int = 20
    l1_hit_latency: int = 1
    header_bytes: int = 8
    word_bytes: int = 4
    cpu_window: int = 1
    gpu_window: int = 16
    write_buffer_entries: int = 64
    mesh: tuple = (4, 4)
    llc_tile: tuple = (1, 1)

    def flavor(self, cls: DeviceClass) -> Flavor:
        return dict(self.flavors)[cls]

    @property
    def is_flexible(self) -> bool:
        return all(f is Flavor.FLEX for _, f in self.flavors)

    def capabilities(self, cls: DeviceClass) -> Capabilities:
        f = self.flavor(cls)
        if f is Flavor.FLEX:
            return Capabilities(self.enable_wt_forwarding, self.enable_owner_prediction, True)
        return Capabilities(False, False, f is not Flavor.MESI)

    def profile(self, block_size_bytes: int = 64, word_size_bytes: int = 4) -> HardwareProfile:
        return HardwareProfile(block_size_bytes=block_size_bytes, word_size_bytes=word_size_bytes,
                               supports_wt_forwarding=self.enable_wt_forwarding,
                               supports_owner_prediction=self.enable_owner_prediction,
                               word_granularity_state={c: self.capabilities(c).word_granularity
                                                       for c in DeviceClass})

    def describe(self) -> str:
        fl = ", ".join(f"{c.value}={f.value}" for c, f in self.flavors)
        return (f"name={self.name}\nflavors={fl}\nwt_forwarding={self.enable_wt_forwarding}\n"
                f"owner_prediction={self.enable_owner_prediction}\nhop_latency={self.hop_latency}\n"
                f"llc_latency={self.llc_latency}\nl1_hit_latency={self.l1_hit_latency}\n"
                f"header_bytes={self.header_bytes}\nword_bytes={self.word_bytes}\n"
                f"cpu_window={self.cpu_window}\ngpu_window={self.gpu_window}\n"
                f"write_buffer_entries={self.write_buffer_entries}\n"
                f"mesh={self.mesh[0]}x{self.mesh[1]}\nllc_tile={self.llc_tile[0]},{self.llc_tile[1]}")

    @classmethod
    def parse(cls, text: str) -> "SimConfig":
        """Inverse of :meth:`describe`; unknown keys are rejected, missing ones keep defaults."""
        kw: dict = {}
        ints = {"hop_latency", "llc_latency", "l1_hit_latency", "header_bytes", "word_bytes",
                "cpu_window", "gpu_window", "write_buffer_entries"}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (x.strip() for x in line.partition("="))
            if not sep:
                raise ValueError(f"line {lineno}: expected key=value")
            if key == "name":
                kw["name"] = val
            elif key == "flavors":
                pairs = [p.split("=") for p in val.split(",")]
                kw["flavors"] = tuple((DeviceClass(c.strip()), Flavor(f.strip())) for c, f in pairs)
            elif key in ("wt_forwarding", "owner_prediction"):
                if val not in ("True", "False"):
                    raise ValueError(f"line {lineno}: {key} must be True or False")
                kw["enable_" + key] = val == "True"
            elif key in ints:
                kw[key] = int(val)
            elif key == "mesh":
                kw["mesh"] = tuple(int(x) for x in val.split("x"))
            elif key == "llc_tile":
                kw["llc_tile"] = tuple(int(x) for x in val.split(","))
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        return cls(**kw)


def _static(name: str, cpu: Flavor, gpu: Flavor) -> SimConfig:
    return SimConfig(name, ((DeviceClass.CPU, cpu), (DeviceClass.GPU, gpu)), False, False)


NAMED_CONFIGS: dict[str, SimConfig] = {
    "SMG": _static("SMG", Flavor.MESI, Flavor.GPU),
    "SMD": _static("SMD", Flavor.MESI, Flavor.DENOVO),
    "SDG": _static("SDG", Flavor.DENOVO, Flavor.GPU),
    "SDD": _static("SDD", Flavor.DENOVO, Flavor.DENOVO),
    "FCS": SimConfig("FCS", enable_wt_forwarding=False, enable_owner_prediction=False),
    "FCS+fwd": SimConfig("FCS+fwd", enable_wt_forwarding=True, enable_owner_prediction=False),
    "FCS+pred": SimConfig("FCS+pred", enable_wt_forwarding=True, enable_owner_prediction=True),
}


def named_config(name: str) -> SimConfig:
    try:
        return NAMED_CONFIGS[name]
    except KeyError:
        raise ValueError(f"unknown configuration {name!r}; valid: {', '.join(NAMED_CONFIGS)}") from None


def static_selection(t: AccessTrace, cfg: SimConfig) -> SelectionMap:
    full = WordMask.full(t.words_per_block)
    entries = {}
    for a in t.accesses:
        rt, line = flavor_static_type(cfg.flavor(a.device_class), a.kind)
        entries[a.seq_id] = (rt, full if line else WordMask.of(a.word_mask))
    return SelectionMap(entries, {}, False)


def selection_for(t: AccessTrace, cfg: SimConfig, params: ScoringParams | None = None) -> SelectionMap:
    if cfg.is_flexible:
        return select_all(t, cfg.profile(t.block_size_bytes, t.word_size_bytes), params)
    return static_selection(t, cfg)


# -------------------------------------------------------------------- metrics

@dataclass
class TxnRecord:
    core: int
    seqs: tuple
    pc: int
    kind: str
    first_type: RequestType
    root: RequestType
    rounds: tuple           # (type, predicted, hit, legs) per round
    legs: int
    retries: int
    start: int
    end: int

    @property
    def predicted(self) -> bool:
        return bool(self.rounds) and self.rounds[0][1]

    @property
    def prediction_hit(self) -> bool:
        return self.predicted and self.rounds[0][2]


@dataclass
class Metrics:
    config: str = ""
    benchmark: str = ""
    cycles: int = 0
    bytes: int = 0
    messages: int = 0
    msgs_by_class: Counter = field(default_factory=Counter)
    msgs_by_type: Counter = field(default_factory=Counter)
    requests_by_type: Counter = field(default_factory=Counter)
    hops: int = 0
    llc_lookups: int = 0
    llc_lookups_by_pc: Counter = field(default_factory=Counter)
    llc_lookups_by_type: Counter = field(default_factory=Counter)
    core_cycles: dict = field(default_factory=dict)
    pred_hits: int = 0
    pred_misses: int = 0
    nacks: int = 0
    max_retries: int = 0
    transactions: list = field(default_factory=list)
    message_log: list = field(default_factory=list)

    def recount_bytes(self, header: int = 8, word: int = 4) -> int:
        return sum(header + word * e[-1] for e in self.message_log)


@dataclass
class SimResult:
    metrics: Metrics
    image: dict             # word address -> value
    rmw_applied: Counter = field(default_factory=Counter)   # (word address, delta) -> count


def message_bytes(msg: Message, cfg: SimConfig) -> int:
    return cfg.header_bytes + cfg.word_bytes * len(msg.data)


# ---------------------------------------------------------------- simulation

class _Core:
    def __init__(self, cid: int, cls: DeviceClass, l1: L1Controller, wb: WriteBuffer, window: int):
        self.id = cid
        self.cls = cls
        self.l1 = l1
        self.wb = wb
        self.window = window
        self.accesses: list[MemoryAccess] = []
        self.ptr = 0
        self.blocked: Optional[int] = None      # block of an in-flight sync access
        self.finished_at: Optional[int] = None
        self.wake_pending = False
        self.now = 0

    @property
    def outstanding(self) -> int:
        return len(self.l1.txns)


class Simulator:
    def __init__(self, t: AccessTrace, sel: SelectionMap, cfg: SimConfig):
        self.t, self.sel, self.cfg = t, sel, cfg
        self.wpb = t.words_per_block
        self.metrics = Metrics(config=cfg.name)
        self.llc = LLCController(self.wpb)
        self.cores: dict[int, _Core] = {}
        for cid, cls in sorted(t.core_table.items()):
            window = cfg.cpu_window if cls is DeviceClass.CPU else cfg.gpu_window
            l1 = L1Controller(cid, self.wpb, cfg.flavor(cls), cfg.capabilities(cls))
            self.cores[cid] = _Core(cid, cls, l1, WriteBuffer(cfg.write_buffer_entries), window)
        for a in t.accesses:
            self.cores[a.core_id].accesses.append(a)
        self._check_selection()
        self.events: list = []
        self.order = 0
        releases = sorted(a.seq_id for a in t.accesses if a.sync is not None and a.sync.releases)
        self.releases = releases
        self.release_done: set = set()
        self.release_ptr = 0
        self.tiles = self._tiles()
        self.rmw_applied: Counter = Counter()

    # -- setup
    def _check_selection(self) -> None:
        for a in self.t.accesses:
            if a.seq_id not in self.sel.entries:
                raise SimulationError(f"selection has no entry for seq {a.seq_id}")
            rt, mask = self.sel.entries[a.seq_id]
            if not WordMask(mask).covers(WordMask.of(a.word_mask)):
                raise SimulationError(f"seq {a.seq_id}: mask does not cover the accessed words")
            caps = self.cfg.capabilities(a.device_class)
            err = caps.check(rt, int(mask), self.wpb)
            if err:
                raise SimulationError(f"seq {a.seq_id} ({a.device_class.value}): {err}")
            if a.kind is AccessKind.LOAD and rt not in (R.ReqV, R.ReqVo, R.ReqS, R.ReqO_data):
                raise SimulationError(f"seq {a.seq_id}: {rt.token} is not a load type")
            if a.kind is AccessKind.STORE and rt not in (R.ReqO, R.ReqO_data, R.ReqWT, R.ReqWTo, R.ReqWTfwd):
                raise SimulationError(f"seq {a.seq_id}: {rt.token} is not a store type")
            if a.kind is AccessKind.RMW and rt not in (R.ReqO_data, R.ReqWT_data, R.ReqWTo_data, R.ReqWTfwd_data):
                raise SimulationError(f"seq {a.seq_id}: {rt.token} is not an RMW type")

    def _tiles(self) -> dict[int, tuple]:
        w, h = self.cfg.mesh
        free = [(x, y) for y in range(h) for x in range(w) if (x, y) != self.cfg.llc_tile]
        out = {LLC: self.cfg.llc_tile}
        for i, cid in enumerate(sorted(self.cores)):
            out[cid] = free[i % len(free)]
        return out

    def latency(self, src: int, dst: int) -> int:
        (x1, y1), (x2, y2) = self.tiles[src], self.tiles[dst]
        return self.cfg.hop_latency * max(1, abs(x1 - x2) + abs(y1 - y2))

    # -- events
    def _push(self, time: int, kind: str, payload) -> None:
        heapq.heappush(self.events, (time, self.order, kind, payload))
        self.order += 1

    def _send(self, now: int, msgs: Iterable[Message]) -> None:
        m = self.metrics
        for msg in msgs:
            n = len(msg.data)
            m.messages += 1
            m.bytes += self.cfg.header_bytes + self.cfg.word_bytes * n
            m.msgs_by_class[msg.cls.value] += 1
            if msg.rtype is not None:
                m.msgs_by_type[msg.rtype.token] += 1
            if msg.cls is MsgClass.REQUEST and msg.src != LLC:
                m.requests_by_type[msg.rtype.token] += 1
            if msg.cls is MsgClass.NACK:
                m.nacks += 1
            m.message_log.append((now, msg.cls.value, msg.rtype.token if msg.rtype else "-",
                                      msg.src, msg.dst, msg.block * self.t.block_size_bytes, msg.mask, n))
            self._push(now + self.latency(msg.src, msg.dst), "msg", msg)

    def _wake(self, core: _Core, time: int) -> None:
        if not core.wake_pending:
            core.wake_pending = True
            self._push(time, "wake", core.id)

    # -- release bookkeeping
    def _first_open_release(self) -> float:
        while self.release_ptr < len(self.releases) and self.releases[self.release_ptr] in self.release_done:
            self.release_ptr += 1
        return self.releases[self.release_ptr] if self.release_ptr < len(self.releases) else float("inf")

    # -- issuing
    def _new_txn(self, core: _Core, kind: AccessKind, rtype: RequestType, block: int, mask: int,
                 need: int, now: int, pc: int, data: dict | None = None, delta: int = 0,
                 seqs: tuple = (), sync: bool = False) -> Optional[Txn]:
        """Build a transaction, resolving prediction; None if prediction gating stalls it."""
        l1 = core.l1
        target = None
        orig = rtype
        if rtype.predicted:
            key = (pc, rtype.root)
            if key in l1.pred_busy:
                return None
            target = l1.pred_table.get(key)
            if target is None or target == core.id:
                rtype, target = rtype.root, None
            else:
                l1.pred_busy.add(key)
        return Txn(core.id, block, kind, rtype, orig, mask, need, pc=pc, data=dict(data or {}), delta=delta,
                   target=target, start=now, seqs=seqs, sync=sync)

    def _start(self, core: _Core, txn: Txn, now: int) -> None:
        try:
            msgs = core.l1.start(txn)
        except ProtocolError as exc:
            raise SimulationError(str(exc)) from None
        self._send(now, msgs)

    def _issue_wb_entry(self, core: _Core, block: int, now: int) -> bool:
        """Try to send one write-buffer entry; False if it must wait."""
        l1 = core.l1
        if block in l1.txns:
            return False
        self._absorb_buffered(core, block)
        e = core.wb.entries.get(block)
        if e is None:
            return True
        need = sum(1 << o for o in e.data)
        rt = e.rtype
        mask = e.mask if rt in (R.ReqO, R.ReqO_data) else need
        if not core.l1.caps.word_granularity:
            mask = (1 << self.wpb) - 1
        txn = self._new_txn(core, AccessKind.STORE, rt, block, mask, need, now, e.pc, e.data,
                            seqs=tuple(e.seqs))
        if txn is None:
            return False
        core.wb.pop(block)
        self._start(core, txn, now)
        return True

    def _drain(self, core: _Core, now: int, limit: Optional[int] = None) -> None:
        issued = 0
        for block in list(core.wb.entries):
            if core.outstanding >= core.window:
                break
            if self._issue_wb_entry(core, block, now):
                issued += 1
                if limit is not None and issued >= limit:
                    break

    def _step(self, core: _Core, now: int) -> None:
        l1 = core.l1
        t = now
        hit = self.cfg.l1_hit_latency
        while True:
            if core.blocked is not None:
                break
            if core.ptr >= len(core.accesses):
                if core.wb.entries:
                    self._drain(core, t)
                if not core.wb.entries and not l1.txns and core.finished_at is None:
                    core.finished_at = t
                break
            a = core.accesses[core.ptr]
            block = a.address // self.t.block_size_bytes
            offs = sorted(a.word_mask)
            rt, mask = self.sel.entries[a.seq_id]
            mask = int(mask)
            need = sum(1 << o for o in offs)
            if a.sync is not None:
                if core.wb.entries:
                    self._drain(core, t)
                    break
                if l1.txns:
                    break
                if a.sync.acquires and self._first_open_release() < a.seq_id:
                    break
                if all(l1.owns(block, o) for o in offs):
                    self._local_rmw(core, a, block)
                    self._sync_done(core, a, t)
                    core.ptr += 1
                    t += hit
                    continue
                txn = self._new_txn(core, AccessKind.RMW, rt, block, mask, need, t, a.static_inst_id,
                                    delta=a.data_value[0], seqs=(a.seq_id,), sync=True)
                if txn is None:
                    break
                core.blocked = block
                core.ptr += 1
                self._start(core, txn, t)
                break
            if block in l1.txns:
                break
            if a.kind is AccessKind.LOAD:
                if all(core.wb.lookup(block, o) is not None or l1.readable(block, (o,)) for o in offs):
                    core.ptr += 1
                    t += hit
                    continue
                if core.outstanding >= core.window:
                    break
                txn = self._new_txn(core, AccessKind.LOAD, rt, block, mask, need, t, a.static_inst_id,
                                    seqs=(a.seq_id,))
                if txn is None:
                    break
                core.ptr += 1
                self._start(core, txn, t)
                t += hit
                continue
            if a.kind is AccessKind.STORE:
                if all(l1.owns(block, o) for o in offs):
                    self._absorb_buffered(core, block)
                    for o, d in zip(offs, a.data_value):
                        l1.local_write(block, o, d)
                else:
                    core.wb.coalesce(block, rt, mask, dict(zip(offs, a.data_value)), a.static_inst_id,
                                     a.seq_id)
                    if core.wb.over_capacity():
                        self._drain(core, t, limit=1)
                core.ptr += 1
                t += hit
                continue
            # non-synchronizing RMW
            if all(l1.owns(block, o) for o in offs):
                self._absorb_buffered(core, block)
                self._local_rmw(core, a, block)
                core.ptr += 1
                t += hit
                continue
            if block in core.wb.entries:
                self._issue_wb_entry(core, block, t)
                break
            if core.outstanding >= core.window:
                break
            txn = self._new_txn(core, AccessKind.RMW, rt, block, mask, need, t, a.static_inst_id,
                                delta=a.data_value[0], seqs=(a.seq_id,))
            if txn is None:
                break
            core.ptr += 1
            self._start(core, txn, t)
            t += hit
        core.now = t

    def _local_rmw(self, core: _Core, a: MemoryAccess, block: int) -> None:
        for o, d in zip(sorted(a.word_mask), a.data_value):
            core.l1.local_rmw(block, o, d)
            self.rmw_applied[((block * self.wpb + o) * self.t.word_size_bytes, d)] += 1

    def _absorb_buffered(self, core: _Core, block: int) -> None:
        """Buffered stores to words the core now owns are written in place."""
        e = core.wb.entries.get(block)
        if e is None:
            return
        for off in list(e.data):
            if core.l1.owns(block, off):
                core.l1.local_write(block, off, e.data.pop(off))
        if not e.data:
            core.wb.pop(block)

    def _sync_done(self, core: _Core, a: MemoryAccess, now: int) -> None:
        if a.sync.acquires:
            core.l1.self_invalidate()
        if a.sync.releases:
            self.release_done.add(a.seq_id)
            for c in self.cores.values():
                if c is not core:
                    self._wake(c, now)

    def _complete(self, core: _Core, comp: Completion, now: int) -> None:
        txn = comp.txn
        self._absorb_buffered(core, txn.block)
        if txn.kind is AccessKind.RMW:
            w = (txn.block * self.wpb + bits(txn.want)[0]) * self.t.word_size_bytes
            self.rmw_applied[(w, txn.delta)] += 1
        legs = sum(r[3] for r in txn.log)
        self.metrics.hops += legs
        self.metrics.max_retries = max(self.metrics.max_retries, txn.retry)
        for r in txn.log:
            if r[1]:
                if r[2]:
                    self.metrics.pred_hits += 1
                else:
                    self.metrics.pred_misses += 1
        self.metrics.transactions.append(TxnRecord(core.id, txn.seqs, txn.pc, txn.kind.value, txn.log[0][0],
                                                   txn.orig.root, tuple(txn.log), legs, txn.retry,
                                                   txn.start, now))
        if txn.sync:
            core.blocked = None
            a = self.t.accesses[txn.seqs[0]]
            self._sync_done(core, a, now)

    def run(self) -> SimResult:
        for core in self.cores.values():
            self._wake(core, 0)
        while self.events:
            now, _, kind, payload = heapq.heappop(self.events)
            if kind == "wake":
                core = self.cores[payload]
                core.wake_pending = False
                self._step(core, max(now, core.now))
                continue
            msg: Message = payload
            try:
                if msg.dst == LLC:
                    if msg.cls is MsgClass.REQUEST:
                        self.metrics.llc_lookups += 1
                        self.metrics.llc_lookups_by_pc[msg.pc] += 1
                        self.metrics.llc_lookups_by_type[msg.rtype.token] += 1
                    out = self.llc.handle(msg)
                    self._send(now + self.cfg.llc_latency, out)
                    continue
                core = self.cores[msg.dst]
                out, comps = core.l1.handle(msg)
            except ProtocolError as exc:
                raise SimulationError(f"cycle {now}: {exc}") from None
            self._send(now + self.cfg.l1_hit_latency, out)
            for comp in comps:
                self._complete(core, comp, now)
            if comps:
                self._wake(core, now)
        return self._finish()

    def _finish(self) -> SimResult:
        m = self.metrics
        for core in self.cores.values():
            pending = [b for b, v in core.l1.deferred.items() if v]
            if core.finished_at is None or core.l1.txns or core.wb.entries or pending:
                raise SimulationError(f"core {core.id} did not quiesce (ptr {core.ptr}/{len(core.accesses)}, "
                                      f"{len(core.l1.txns)} open transactions)")
            m.core_cycles[core.id] = core.finished_at
        if self.llc.transient or any(self.llc.queue.values()):
            raise SimulationError("LLC did not quiesce")
        m.cycles = max(m.core_cycles.values(), default=0)
        image = {}
        for w in touched_words(self.t):
            b, o = divmod(w, self.wpb)
            owner = self.llc.owner_of(b, o)
            if owner is None:
                image[w * self.t.word_size_bytes] = self.llc.value(b, o)
            else:
                l1 = self.cores[owner].l1
                if not l1.owns(b, o):
                    raise SimulationError(f"LLC names core {owner} as owner of word {w} but it does not own it")
                image[w * self.t.word_size_bytes] = l1.value(b, o)
        return SimResult(m, image, self.rmw_applied)


def touched_words(t: AccessTrace) -> list[int]:
    words = set()
    for a in t.accesses:
        words.update(t.word_ids(a))
    return sorted(words)


def run_simulation(t: AccessTrace, sel: SelectionMap, cfg: SimConfig) -> SimResult:
    return Simulator(t, sel, cfg).run()


def sc_reference_execute(t: AccessTrace) -> dict:
    """Apply the trace in order to a flat memory; returns word address -> value."""
    mem = {w * t.word_size_bytes: 0 for w in touched_words(t)}
    for a in t.accesses:
        if a.kind is AccessKind.LOAD:
            continue
        for w, v in zip(t.word_ids(a), a.data_value):
            addr = w * t.word_size_bytes
            mem[addr] = v if a.kind is AccessKind.STORE else mem[addr] + v
    return mem


def rmw_applications(t: AccessTrace) -> Counter:
    """Multiset of (word address, delta) RMW applications the trace contains."""
    c: Counter = Counter()
    for a in t.accesses:
        if a.kind is AccessKind.RMW:
            for w, v in zip(t.word_ids(a), a.data_value):
                c[(w * t.word_size_bytes, v)] += 1
    return c


# -------------------------------------------------------------------- report

TYPE_COLUMNS = [rt.token for rt in RequestType]
CSV_COLUMNS = (["config", "benchmark", "cycles", "bytes", "messages", "hops", "llc_lookups"]
               + [f"req:{tok}" for tok in TYPE_COLUMNS] + ["pred_hits", "pred_misses", "nacks"])


def metrics_row(m: Metrics) -> dict:
    row = {"config": m.config, "benchmark": m.benchmark, "cycles": m.cycles, "bytes": m.bytes,
           "messages": m.messages, "hops": m.hops, "llc_lookups": m.llc_lookups,
           "pred_hits": m.pred_hits, "pred_misses": m.pred_misses, "nacks": m.nacks}
    for tok in TYPE_COLUMNS:
        row[f"req:{tok}"] = m.requests_by_type.get(tok, 0)
    return row


def emit_metrics(rows: Iterable[Metrics], fmt: str = "csv", baseline: Optional[str] = None) -> str:
    rows = list(rows)
    cols = list(CSV_COLUMNS)
    base_bytes: dict = {}
    if baseline is not None:
        cols += ["bytes_vs_baseline", "cycles_vs_baseline"]
        for m in rows:
            if m.config == baseline:
                base_bytes[m.benchmark] = m
    table = []
    for m in rows:
        row = metrics_row(m)
        if baseline is not None:
            b = base_bytes.get(m.benchmark)
            row["bytes_vs_baseline"] = f"{m.bytes / b.bytes:.3f}" if b and b.bytes else ""
            row["cycles_vs_baseline"] = f"{m.cycles / b.cycles:.3f}" if b and b.cycles else ""
        table.append(row)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(table)
        return buf.getvalue()
    if fmt == "text":
        lines = []
        for row in table:
            lines.append(f"[{row['benchmark']} / {row['config']}]")
            for c in cols[2:]:
                if isinstance(row[c], int) and c.startswith("req:") and not row[c]:
                    continue
                lines.append(f"  {c:<22} {row[c]}")
        return "\n".join(lines) + ("\n" if lines else "")
    raise ValueError(f"unknown format {fmt!r}")
