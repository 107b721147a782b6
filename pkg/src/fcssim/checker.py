"""Exhaustive exploration of the coherence controllers on tiny systems.

Every core may, at any moment, issue any enabled request type for any
address it has no transaction on, and any in-flight message may be
delivered next (unordered network).  Values live in a two-element domain:
stores write 1 and atomics add 1 modulo 2.

A ghost value per word records the latest write whenever the write order is
unambiguous, i.e. the write neither overlapped another core's write to the
same word nor followed a write whose ghost was already lost.  It is used
only for the quiescent data check and is excluded from the protocol state
count.
"""
from __future__ import annotations

import csv
import io
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .coherence import (LLC, FAULTS, NACKABLE, Capabilities, LLCController, L1Controller, Message,
                        MsgClass, ProtocolError, Txn, WordState)
from .selector import RequestType
from .trace import AccessKind

R = RequestType

BASELINE_TYPES = frozenset({R.ReqV, R.ReqS, R.ReqO, R.ReqO_data, R.ReqWT, R.ReqWT_data})
FWD_TYPES = BASELINE_TYPES | {R.ReqWTfwd, R.ReqWTfwd_data}
PRED_TYPES = FWD_TYPES | {R.ReqVo, R.ReqWTo, R.ReqWTo_data}

# "extend": each step adds its types next to the old ones.
# "substitute": each step replaces the type it refines, so the alphabet size
# stays fixed and only the mechanism changes.
VARIANT_SETS = {
    "extend": {"baseline": BASELINE_TYPES, "+fwd": FWD_TYPES, "+pred": PRED_TYPES},
    "substitute": {
        "baseline": BASELINE_TYPES,
        "+fwd": (BASELINE_TYPES - {R.ReqWT, R.ReqWT_data}) | {R.ReqWTfwd, R.ReqWTfwd_data},
        "+pred": (BASELINE_TYPES - {R.ReqV, R.ReqWT, R.ReqWT_data}) | {R.ReqVo, R.ReqWTo, R.ReqWTo_data},
    },
}
VARIANTS = VARIANT_SETS["extend"]

_KIND_TYPES = {
    AccessKind.LOAD: (R.ReqV, R.ReqVo, R.ReqS, R.ReqO_data),
    AccessKind.STORE: (R.ReqO, R.ReqO_data, R.ReqWT, R.ReqWTfwd, R.ReqWTo),
    AccessKind.RMW: (R.ReqO_data, R.ReqWT_data, R.ReqWTfwd_data, R.ReqWTo_data),
}

MODULUS = 2
UNKNOWN = -1


class CheckBudgetExceeded(RuntimeError):
    def __init__(self, states: int, frontier: int):
        super().__init__(f"state budget exhausted after {states} states (frontier {frontier})")
        self.states = states
        self.frontier = frontier


@dataclass(frozen=True)
class CheckConfig:
    n_cores: int = 2
    n_addresses: int = 2
    words_per_line: int = 1
    enabled_types: frozenset = BASELINE_TYPES
    kinds: tuple = (AccessKind.LOAD, AccessKind.STORE, AccessKind.RMW)
    acquires: bool = True
    max_in_flight: int = 8               # per line: no new issue once this many messages are queued
    ops_per_word: Optional[int] = 2      # issue budget per (core, address); None = unbounded
    max_outstanding_per_core: Optional[int] = None
    state_budget: int = 10 ** 7
    faults: frozenset = frozenset()
    name: str = ""

    def __post_init__(self):
        if not 1 <= self.n_cores <= 3:
            raise ValueError("n_cores must be 1..3")
        if not 1 <= self.n_addresses <= 2:
            raise ValueError("n_addresses must be 1 or 2")
        if self.words_per_line not in (1, 2):
            raise ValueError("words_per_line must be 1 or 2")
        unknown = set(self.faults) - set(FAULTS)
        if unknown:
            raise ValueError(f"unknown faults {sorted(unknown)}")

    @property
    def separable(self) -> bool:
        """True when addresses live in distinct lines and nothing couples them,
        so the reachable set is the product of the per-address sets."""
        return self.words_per_line == 1 and self.max_outstanding_per_core is None

    def address(self, a: int) -> tuple[int, int]:
        return divmod(a, self.words_per_line)

    def ops(self) -> list[tuple[AccessKind, RequestType]]:
        return [(k, rt) for k in self.kinds for rt in _KIND_TYPES[k] if rt in self.enabled_types]


def variant_config(base: CheckConfig, variant: str, mode: str = "extend") -> CheckConfig:
    return replace(base, enabled_types=VARIANT_SETS[mode][variant], name=variant)


# ---------------------------------------------------------------- state

class _State:
    """Copy-on-write system state: controllers are shared with the parent
    until ``l1(i)`` or ``llc_w()`` hands out a private copy."""
    __slots__ = ("l1s", "llc", "net", "ghost", "dirty", "ops_left", "_own", "_keys", "_llc_key")

    def __init__(self, l1s, llc, net, ghost, dirty, ops_left):
        self.l1s: list[L1Controller] = l1s
        self.llc: LLCController = llc
        self.net: list[Message] = net
        self.ghost: dict = ghost          # (block, off) -> value or UNKNOWN
        self.dirty: frozenset = dirty     # (core, block) write transactions with ambiguous order
        self.ops_left = ops_left          # per (core, address), or None when unbounded
        self._own = set()
        self._keys: list = [None] * len(l1s)
        self._llc_key = None

    def clone(self) -> "_State":
        c = _State(list(self.l1s), self.llc, list(self.net), dict(self.ghost), self.dirty, self.ops_left)
        c._keys = list(self._keys)
        c._llc_key = self._llc_key
        return c

    def l1(self, i: int) -> L1Controller:
        if i not in self._own:
            self.l1s[i] = self.l1s[i].clone()
            self._own.add(i)
        self._keys[i] = None
        return self.l1s[i]

    def llc_w(self) -> LLCController:
        if "llc" not in self._own:
            self.llc = self.llc.clone()
            self._own.add("llc")
        self._llc_key = None
        return self.llc

    def protocol_key(self) -> tuple:
        for i, k in enumerate(self._keys):
            if k is None:
                self._keys[i] = self.l1s[i].key()
        if self._llc_key is None:
            self._llc_key = self.llc.key()
        return (tuple(self._keys), self._llc_key, tuple(sorted(m.key() for m in self.net)))

    def key(self) -> tuple:
        return (self.protocol_key(), tuple(sorted(self.ghost.items())), tuple(sorted(self.dirty)), self.ops_left)


def _initial(cfg: CheckConfig) -> _State:
    caps = Capabilities(True, True, True)
    l1s = [L1Controller(c, cfg.words_per_line, caps=caps, faults=cfg.faults, modulus=MODULUS)
           for c in range(cfg.n_cores)]
    llc = LLCController(cfg.words_per_line, faults=cfg.faults, modulus=MODULUS)
    ghost = {cfg.address(a): 0 for a in range(cfg.n_addresses)}
    left = None if cfg.ops_per_word is None else (cfg.ops_per_word,) * (cfg.n_cores * cfg.n_addresses)
    return _State(l1s, llc, [], ghost, frozenset(), left)


# ---------------------------------------------------------------- events

# ("issue", core, addr, kind, rtype, target) | ("deliver", message key) | ("acquire", core, block)
# An acquire is split per block: dropping Valid copies of distinct lines commutes.

def _write_kind(k: AccessKind) -> bool:
    return k is not AccessKind.LOAD


def _other_writers(s: _State, core: int, block: int) -> list[int]:
    return [l.core for l in s.l1s if l.core != core and block in l.txns and _write_kind(l.txns[block].kind)]


def _ghost_write(s: _State, word: tuple, kind: AccessKind, dirty: bool) -> None:
    if dirty:
        s.ghost[word] = UNKNOWN
    elif kind is AccessKind.STORE:
        s.ghost[word] = 1
    elif s.ghost[word] != UNKNOWN:
        s.ghost[word] = (s.ghost[word] + 1) % MODULUS


def _issue(s: _State, cfg: CheckConfig, core: int, addr: int, kind: AccessKind, rt: RequestType,
           target: Optional[int]) -> Optional[str]:
    """Apply an issue event in place; returns None or a violation message."""
    l1 = s.l1(core)
    block, off = cfg.address(addr)
    word = (block, off)
    if kind is AccessKind.LOAD and l1.readable(block, (off,)):
        return None
    if kind is not AccessKind.LOAD and l1.owns(block, off):
        others = _other_writers(s, core, block)
        if kind is AccessKind.STORE:
            l1.local_write(block, off, 1)
        else:
            l1.local_rmw(block, off, 1)
        if others:
            s.dirty = s.dirty | {(c, block) for c in others}
        _ghost_write(s, word, kind, bool(others))
        return None
    mask = 1 << off
    if rt is R.ReqS:
        mask = (1 << cfg.words_per_line) - 1
    data = {off: 1} if kind is AccessKind.STORE else {}
    delta = 1 if kind is AccessKind.RMW else 0
    if rt.predicted and target is None:
        rt_eff = rt.root
    else:
        rt_eff = rt
    txn = Txn(core, block, kind, rt_eff, rt, mask, 1 << off, data=data, delta=delta, target=target)
    if _write_kind(kind):
        others = _other_writers(s, core, block)
        if others:
            s.dirty = s.dirty | {(c, block) for c in others} | {(core, block)}
    s.net.extend(l1.start(txn))
    return None


def _enabled(s: _State, cfg: CheckConfig) -> list[tuple]:
    evs: list[tuple] = []
    seen = set()
    for m in s.net:
        k = m.key()
        if k not in seen:
            seen.add(k)
            evs.append(("deliver", k))
    per_block = Counter(m.block for m in s.net)
    ops = cfg.ops()
    for core in range(cfg.n_cores):
        l1 = s.l1s[core]
        if cfg.max_outstanding_per_core is not None and len(l1.txns) >= cfg.max_outstanding_per_core:
            continue
        for addr in range(cfg.n_addresses):
            if s.ops_left is not None and not s.ops_left[core * cfg.n_addresses + addr]:
                continue
            block, off = cfg.address(addr)
            if block in l1.txns or per_block[block] >= cfg.max_in_flight:
                continue
            for kind, rt in ops:
                if kind is AccessKind.LOAD and l1.readable(block, (off,)):
                    continue
                if rt.predicted:
                    for tgt in [c for c in range(cfg.n_cores) if c != core] + [None]:
                        evs.append(("issue", core, addr, kind.value, rt.token, tgt))
                else:
                    evs.append(("issue", core, addr, kind.value, rt.token, None))
    if cfg.acquires:
        for core in range(cfg.n_cores):
            blocks = sorted({k[0] for k, (st, _) in s.l1s[core].words.items() if st is WordState.V})
            evs.extend(("acquire", core, b) for b in blocks)
    return evs


def _apply(s: _State, cfg: CheckConfig, ev: tuple) -> Optional[str]:
    """Mutates ``s``; returns a violation message or None."""
    try:
        if ev[0] == "deliver":
            idx = next(i for i, m in enumerate(s.net) if m.key() == ev[1])
            msg = s.net.pop(idx)
            if msg.cls is MsgClass.NACK:
                t = s.l1s[msg.dst].txns.get(msg.block) if msg.dst != LLC else None
                if t is None or t.rtype not in NACKABLE:
                    return f"Nack answering a non-forwarded request ({t.rtype.token if t else 'none'})"
            if msg.dst == LLC:
                s.net.extend(s.llc_w().handle(msg))
                return None
            out, comps = s.l1(msg.dst).handle(msg)
            s.net.extend(out)
            for comp in comps:
                t = comp.txn
                if _write_kind(t.kind):
                    (off,) = [o for o in range(cfg.words_per_line) if t.want >> o & 1]
                    key = (t.core, t.block)
                    _ghost_write(s, (t.block, off), t.kind, key in s.dirty)
                    s.dirty = s.dirty - {key}
            return None
        if ev[0] == "acquire":
            s.l1(ev[1]).self_invalidate(ev[2])
            return None
        _, core, addr, kind, tok, tgt = ev
        if s.ops_left is not None:
            i = core * cfg.n_addresses + addr
            s.ops_left = s.ops_left[:i] + (s.ops_left[i] - 1,) + s.ops_left[i + 1:]
        return _issue(s, cfg, core, addr, AccessKind(kind), R.from_token(tok), tgt)
    except ProtocolError as exc:
        return f"protocol error: {exc}"


# ------------------------------------------------------------- invariants

def _quiescent(s: _State) -> bool:
    return (not s.net and all(not l.txns and not any(l.deferred.values()) for l in s.l1s)
            and not s.llc.transient and not any(s.llc.queue.values()))


def check_invariants(s: _State, cfg: CheckConfig) -> list[str]:
    out = []
    inv_to = {(m.dst, m.block) for m in s.net if m.cls is MsgClass.INVALIDATE}
    for a in range(cfg.n_addresses):
        b, o = cfg.address(a)
        owners = [l.core for l in s.l1s if l.owns(b, o)]
        if len(owners) > 1:
            out.append(f"single-owner: word {a} owned by cores {owners}")
        auth = s.l1s[owners[0]].value(b, o) if owners else s.llc.value(b, o)
        for l in s.l1s:
            if l.state(b, o) is not WordState.S:
                continue
            stale = bool(owners) or l.value(b, o) != s.llc.value(b, o)
            own_write = b in l.txns and _write_kind(l.txns[b].kind)
            if stale and (l.core, b) not in inv_to and not own_write:
                out.append(f"stale-shared: core {l.core} holds word {a} Shared with no invalidation in flight")
        if _quiescent(s):
            llc_owner = s.llc.owner_of(b, o)
            if (llc_owner is None) != (not owners) or (owners and llc_owner != owners[0]):
                out.append(f"owner-pointer: LLC names {llc_owner} for word {a}, L1 owners {owners}")
            g = s.ghost[(b, o)]
            if g != UNKNOWN and auth != g:
                out.append(f"data: word {a} holds {auth}, last write left {g}")
    return out


def _deadlocked(s: _State) -> bool:
    pending = any(l.txns or any(l.deferred.values()) for l in s.l1s) or s.llc.transient
    return bool(pending) and not s.net


# ---------------------------------------------------------------- explore

@dataclass
class Violation:
    kind: str
    message: str
    events: list

    def __str__(self) -> str:
        return f"{self.kind}: {self.message} after {len(self.events)} events"


@dataclass
class ExploreResult:
    config: CheckConfig
    states: int = 0                 # full states incl. ghost bookkeeping
    protocol_states: int = 0        # distinct controller + network vectors
    transitions: int = 0
    max_frontier: int = 0
    violations: list = field(default_factory=list)
    deadlocks: list = field(default_factory=list)
    components: int = 1             # >1 when counts are a product of identical per-address runs
    truncated: bool = False         # stopped at the violation cap; counts are partial

    @property
    def ok(self) -> bool:
        return not self.violations and not self.deadlocks


def _path(parents: list, idx: int) -> list:
    evs = []
    while parents[idx] is not None:
        idx, ev = parents[idx]
        evs.append(ev)
    return evs[::-1]


def explore(cfg: CheckConfig, max_violations: int = 5, order: str = "bfs",
            decompose: bool = True) -> ExploreResult:
    """Enumerate every reachable state of ``cfg``.

    With ``decompose`` and a separable config, one address is explored and
    the counts are raised to the number of addresses: the product of the
    per-address systems is exactly the joint system (checked by the tests
    against a direct run).  Counterexamples then name address 0.
    """
    if decompose and cfg.separable and cfg.n_addresses > 1:
        n = cfg.n_addresses
        one = _explore_direct(replace(cfg, n_addresses=1), max_violations, order)
        if one.truncated:
            one.config = cfg
            return one
        return ExploreResult(cfg, states=one.states ** n, protocol_states=one.protocol_states ** n,
                             transitions=n * one.transitions * one.states ** (n - 1),
                             max_frontier=one.max_frontier, violations=one.violations,
                             deadlocks=one.deadlocks, components=n)
    return _explore_direct(cfg, max_violations, order)


def _explore_direct(cfg: CheckConfig, max_violations: int, order: str) -> ExploreResult:
    init = _initial(cfg)
    res = ExploreResult(cfg)
    index = {init.key(): 0}
    protocol = {init.protocol_key()}
    parents: list = [None]
    frontier = deque([(init, 0)])
    while frontier:
        res.max_frontier = max(res.max_frontier, len(frontier))
        s, idx = frontier.popleft() if order == "bfs" else frontier.pop()
        for ev in _enabled(s, cfg):
            n = s.clone()
            err = _apply(n, cfg, ev)
            res.transitions += 1
            if err is None:
                errs = check_invariants(n, cfg)
                err = errs[0] if errs else None
            if err is not None:
                if len(res.violations) < max_violations:
                    res.violations.append(Violation("invariant", err, _path(parents, idx) + [ev]))
                continue
            k = n.key()
            if k in index:
                continue
            index[k] = len(parents)
            parents.append((idx, ev))
            protocol.add(n.protocol_key())
            if _deadlocked(n) and len(res.deadlocks) < max_violations:
                res.deadlocks.append(Violation("deadlock", "outstanding work with an empty network",
                                               _path(parents, index[k])))
            if len(index) > cfg.state_budget:
                raise CheckBudgetExceeded(len(index), len(frontier))
            frontier.append((n, index[k]))
        if len(res.violations) >= max_violations:
            res.truncated = True
            break
    res.states = len(index)
    res.protocol_states = len(protocol)
    return res


# ---------------------------------------------------------- counterexamples

def replay(cfg: CheckConfig, events: Iterable[tuple]) -> Optional[str]:
    """Run ``events`` from the initial state; the first violation found, or
    None.  A deadlock at the end counts; a disabled event makes the sequence
    invalid (returns None)."""
    s = _initial(cfg)
    for ev in events:
        if ev not in _enabled(s, cfg):
            return None
        err = _apply(s, cfg, ev)
        if err is None:
            errs = check_invariants(s, cfg)
            err = errs[0] if errs else None
        if err is not None:
            return err
    if _deadlocked(s):
        return "deadlock"
    return None


def minimize_counterexample(cfg: CheckConfig, events: list) -> list:
    """Greedy single-event deletion while the sequence still violates."""
    if replay(cfg, events) is None:
        raise ValueError("sequence does not violate")
    cur = list(events)
    changed = True
    while changed:
        changed = False
        for i in range(len(cur)):
            cand = cur[:i] + cur[i + 1:]
            if replay(cfg, cand) is not None:
                cur = cand
                changed = True
                break
    return cur


def format_events(events: list) -> str:
    lines = []
    for ev in events:
        if ev[0] == "deliver":
            cls, src, dst, _req, block, mask, rt = ev[1][:7]
            lines.append(f"deliver {cls} {rt or '-'} {src}->{dst} block {block} mask {mask:#x}")
        elif ev[0] == "acquire":
            lines.append(f"core {ev[1]} acquire (block {ev[2]})")
        else:
            _, core, addr, kind, tok, tgt = ev
            lines.append(f"core {core} {kind} addr {addr} via {tok}" + (f" -> core {tgt}" if tgt is not None else ""))
    return "\n".join(lines)


# ------------------------------------------------------------ comparisons

@dataclass
class CountRow:
    variant: str
    states: int
    protocol_states: int
    ratio: float
    ok: bool


def compare_state_counts(base: CheckConfig, variants: Iterable[str] = ("baseline", "+fwd", "+pred"),
                         mode: str = "extend") -> list[CountRow]:
    """Protocol-state counts per variant, as a ratio to the first one."""
    rows = []
    ref = None
    for v in variants:
        r = explore(variant_config(base, v, mode))
        if ref is None:
            ref = r.protocol_states
        rows.append(CountRow(v, r.states, r.protocol_states, r.protocol_states / ref, r.ok))
    return rows


def mutation_suite(base: CheckConfig | None = None) -> dict[str, ExploreResult]:
    """Run each seeded protocol bug on the richest variant."""
    base = base or CheckConfig()
    return {f: explore(replace(variant_config(base, "+pred"), faults=frozenset({f})), max_violations=1)
            for f in FAULTS}


def format_results(results: Iterable[ExploreResult], fmt: str = "text") -> str:
    results = list(results)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "states", "protocol_states", "violations", "deadlocks", "max_frontier"])
        for r in results:
            w.writerow([r.config.name or "custom", r.states, r.protocol_states, len(r.violations),
                        len(r.deadlocks), r.max_frontier])
        return buf.getvalue()
    lines = []
    for r in results:
        lines.append(f"[{r.config.name or 'custom'}] states={r.states} protocol_states={r.protocol_states} "
                     f"violations={len(r.violations)} deadlocks={len(r.deadlocks)} max_frontier={r.max_frontier}")
        for v in r.violations + r.deadlocks:
            lines.append(f"  {v}")
            lines.extend("    " + ln for ln in format_events(v.events).splitlines())
    return "\n".join(lines) + "\n"
