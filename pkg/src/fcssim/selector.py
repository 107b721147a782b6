"""Per-access coherence request-type selection over an SC trace.

The heuristics walk the trace forwards (next conflicting access to the same
word, or to the same block) and backwards (previous access from the same
core) to score ownership, shared state and owner prediction.  Each word of a
multi-word access is scored separately and the words vote.
"""
from __future__ import annotations

from bisect import bisect_left, bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .trace import AccessKind, AccessTrace, DeviceClass, MemoryAccess


class RequestType(Enum):
    ReqV = "ReqV"
    ReqVo = "ReqVo"
    ReqS = "ReqS"
    ReqWT = "ReqWT"
    ReqWTo = "ReqWTo"
    ReqWTfwd = "ReqWTfwd"
    ReqO = "ReqO"
    ReqO_data = "ReqO+data"
    ReqWT_data = "ReqWT+data"
    ReqWTo_data = "ReqWTo+data"
    ReqWTfwd_data = "ReqWTfwd+data"

    @classmethod
    def from_token(cls, tok: str) -> "RequestType":
        try:
            return cls(tok)
        except ValueError:
            raise ValueError(f"unknown request type token {tok!r}") from None

    @property
    def token(self) -> str:
        return self.value

    @property
    def predicted(self) -> bool:
        return self in PREDICTED_TYPES

    @property
    def forwarded(self) -> bool:
        return self in FORWARDED_TYPES

    @property
    def ownership(self) -> bool:
        return self in (RequestType.ReqO, RequestType.ReqO_data)

    @property
    def write_through(self) -> bool:
        return self in WRITE_THROUGH_TYPES

    @property
    def carries_rmw(self) -> bool:
        return self in (RequestType.ReqWT_data, RequestType.ReqWTo_data, RequestType.ReqWTfwd_data)

    @property
    def root(self) -> "RequestType":
        """The LLC-routed type a predicted request falls back to."""
        return _ROOT.get(self, self)


R = RequestType
LOAD_TYPES = frozenset({R.ReqV, R.ReqVo, R.ReqS, R.ReqO_data})
STORE_TYPES = frozenset({R.ReqO, R.ReqWT, R.ReqWTo, R.ReqWTfwd, R.ReqO_data})
RMW_TYPES = frozenset({R.ReqO_data, R.ReqWT_data, R.ReqWTo_data, R.ReqWTfwd_data})
PREDICTED_TYPES = frozenset({R.ReqVo, R.ReqWTo, R.ReqWTo_data})
FORWARDED_TYPES = frozenset({R.ReqWTfwd, R.ReqWTfwd_data, R.ReqWTo, R.ReqWTo_data})
WRITE_THROUGH_TYPES = frozenset({R.ReqWT, R.ReqWTo, R.ReqWTfwd})
BASELINE_TYPES = frozenset({R.ReqV, R.ReqS, R.ReqWT, R.ReqWT_data, R.ReqO, R.ReqO_data})
_ROOT = {R.ReqVo: R.ReqV, R.ReqWTo: R.ReqWTfwd, R.ReqWTo_data: R.ReqWTfwd_data}

# vote tie-break, earlier wins
TIE_PRIORITY = (R.ReqO_data, R.ReqO, R.ReqS, R.ReqWTfwd, R.ReqWTfwd_data, R.ReqWTo,
                R.ReqWTo_data, R.ReqVo, R.ReqWT, R.ReqWT_data, R.ReqV)
_TIE_RANK = {t: i for i, t in enumerate(TIE_PRIORITY)}


class WordMask(int):
    """Bitset over the word offsets of one block."""

    @classmethod
    def of(cls, words: Iterable[int]) -> "WordMask":
        return cls(sum(1 << w for w in set(words)))

    @classmethod
    def full(cls, words_per_block: int) -> "WordMask":
        return cls((1 << words_per_block) - 1)

    def words(self) -> list[int]:
        return [i for i in range(self.bit_length()) if self >> i & 1]

    def __or__(self, other) -> "WordMask":
        return WordMask(int(self) | int(other))

    def covers(self, other) -> bool:
        return int(other) & ~int(self) == 0

    def __repr__(self) -> str:
        return f"WordMask({int(self):#x})"


@dataclass(frozen=True)
class HardwareProfile:
    cache_capacity_bytes: dict = field(default_factory=lambda: {DeviceClass.CPU: 32 * 1024,
                                                                DeviceClass.GPU: 64 * 1024})
    block_size_bytes: int = 64
    word_size_bytes: int = 4
    supports_wt_forwarding: bool = True
    supports_owner_prediction: bool = True
    word_granularity_state: dict = field(default_factory=lambda: {DeviceClass.CPU: True,
                                                                  DeviceClass.GPU: True})
    latency_sensitive: dict = field(default_factory=lambda: {DeviceClass.CPU: True,
                                                             DeviceClass.GPU: False})

    def __post_init__(self):
        if any(v <= 0 for v in self.cache_capacity_bytes.values()):
            raise ValueError("cache capacities must be positive")
        if self.block_size_bytes % self.word_size_bytes:
            raise ValueError("block size must be a multiple of word size")

    def __hash__(self):
        return hash((self.block_size_bytes, self.word_size_bytes, self.supports_wt_forwarding,
                     self.supports_owner_prediction))

    def check_trace(self, t: AccessTrace) -> None:
        if (t.block_size_bytes, t.word_size_bytes) != (self.block_size_bytes, self.word_size_bytes):
            raise ValueError("profile block/word sizes differ from the trace")

    def can_issue(self, rt: RequestType) -> bool:
        if rt.forwarded and not self.supports_wt_forwarding:
            return False
        if rt.predicted and not self.supports_owner_prediction:
            return False
        return True


@dataclass(frozen=True)
class ScoringParams:
    ownership_phase_window: int = 5
    ownerpred_phase_window: int = 4
    reuse_capacity_fraction: float = 0.75
    criticality_cpu_load: float = 6
    criticality_gpu_load: float = 2
    criticality_default: float = 1
    same_core_weight_mult: float = 2
    diff_core_weight_mult: float = 0.5

    def __post_init__(self):
        if self.ownership_phase_window < 1 or self.ownerpred_phase_window < 1:
            raise ValueError("phase windows must be >= 1")
        if not 0 < self.reuse_capacity_fraction <= 1:
            raise ValueError("reuse_capacity_fraction must be in (0, 1]")
        if min(self.criticality_cpu_load, self.criticality_gpu_load, self.criticality_default,
               self.same_core_weight_mult, self.diff_core_weight_mult) <= 0:
            raise ValueError("weights must be positive")


# ------------------------------------------------------------------ navigation

class NavIndex:
    """Position indices over one trace.  Positions equal seq ids."""

    def __init__(self, t: AccessTrace):
        self.trace = t
        acc = t.accesses
        self.n = len(acc)
        self.words: list[tuple[int, ...]] = [tuple(t.word_ids(a)) for a in acc]
        self.blocks: list[int] = [t.block_of(a) for a in acc]
        word_pos: dict[int, list[int]] = defaultdict(list)
        block_pos: dict[int, list[int]] = defaultdict(list)
        core_kind: dict[tuple[int, AccessKind], list[int]] = defaultdict(list)
        core_block: dict[tuple[int, int], list[int]] = defaultdict(list)
        sync_any: dict[int, list[int]] = defaultdict(list)
        sync_acq: dict[int, list[int]] = defaultdict(list)
        sync_rel: dict[int, list[int]] = defaultdict(list)
        ev_pos: dict[int, list[int]] = defaultdict(list)
        ev_prev: dict[int, list[int]] = defaultdict(list)
        last_seen: dict[tuple[int, int], int] = {}
        for i, a in enumerate(acc):
            for w in self.words[i]:
                word_pos[w].append(i)
                ev_pos[a.core_id].append(i)
                ev_prev[a.core_id].append(last_seen.get((a.core_id, w), -1))
                last_seen[(a.core_id, w)] = i
            block_pos[self.blocks[i]].append(i)
            core_kind[(a.core_id, a.kind)].append(i)
            core_block[(a.core_id, self.blocks[i])].append(i)
            if a.sync is not None:
                sync_any[a.core_id].append(i)
                if a.sync.acquires:
                    sync_acq[a.core_id].append(i)
                if a.sync.releases:
                    sync_rel[a.core_id].append(i)
        self.word_pos = dict(word_pos)
        self.block_pos = dict(block_pos)
        self.core_kind = dict(core_kind)
        self.core_block = dict(core_block)
        self.sync_any, self.sync_acq, self.sync_rel = dict(sync_any), dict(sync_acq), dict(sync_rel)
        self.ev_pos_list = dict(ev_pos)
        self.ev_prev = {c: np.asarray(v, dtype=np.int64) for c, v in ev_prev.items()}

    def _check(self, x: int) -> None:
        if not 0 <= x < self.n:
            raise IndexError(f"access {x} is not in the trace")

    def access(self, x: int) -> MemoryAccess:
        return self.trace.accesses[x]

    def next_conflict(self, x: int, words: Sequence[int] | None = None) -> Optional[int]:
        self._check(x)
        best = None
        for w in words if words is not None else self.words[x]:
            lst = self.word_pos[w]
            k = bisect_right(lst, x)
            if k < len(lst) and (best is None or lst[k] < best):
                best = lst[k]
        return best

    def prev_conf(self, x: int, words: Sequence[int] | None = None) -> Optional[int]:
        self._check(x)
        best = None
        for w in words if words is not None else self.words[x]:
            lst = self.word_pos.get(w, ())
            k = bisect_left(lst, x)
            if k > 0 and (best is None or lst[k - 1] > best):
                best = lst[k - 1]
        return best

    def next_block_conflict(self, x: int) -> Optional[int]:
        self._check(x)
        lst = self.block_pos[self.blocks[x]]
        k = bisect_right(lst, x)
        return lst[k] if k < len(lst) else None

    def prev_acc(self, x: int) -> Optional[int]:
        self._check(x)
        return x - 1 if x > 0 else None

    def prev_same_core_kind(self, x: int) -> list[int]:
        """Earlier accesses with X's core and kind, most recent first."""
        a = self.access(x)
        lst = self.core_kind[(a.core_id, a.kind)]
        k = bisect_left(lst, x)
        return lst[k - 1::-1] if k else []

    def future_same_core_block(self, x: int) -> list[int]:
        a = self.access(x)
        lst = self.core_block[(a.core_id, self.blocks[x])]
        return lst[bisect_right(lst, x):]

    def syncs_between(self, core: int, lo: int, hi: int, which: str = "any") -> bool:
        table = {"any": self.sync_any, "acq": self.sync_acq, "rel": self.sync_rel}[which]
        lst = table.get(core, ())
        k = bisect_right(lst, lo)
        return k < len(lst) and lst[k] < hi

    def unique_words_between(self, core: int, lo: int, hi: int, at_least: float | None = None) -> int:
        """Distinct words touched by ``core`` at positions strictly between lo and hi.

        With ``at_least`` the exact count is skipped when the raw event count
        already shows the total is below that bound; the raw count is returned.
        """
        pos = self.ev_pos_list.get(core)
        if pos is None or hi - lo < 2:
            return 0
        a = bisect_right(pos, lo)
        b = bisect_left(pos, hi)
        if b <= a:
            return 0
        if at_least is not None and b - a < at_least:
            return b - a
        return int(np.count_nonzero(self.ev_prev[core][a:b] <= lo))


_NAV_CACHE: dict[int, tuple[AccessTrace, NavIndex]] = {}


def trace_nav(t: AccessTrace) -> NavIndex:
    hit = _NAV_CACHE.get(id(t))
    if hit is not None and hit[0] is t and hit[1].n == len(t.accesses):
        return hit[1]
    nav = NavIndex(t)
    if len(_NAV_CACHE) > 8:
        _NAV_CACHE.clear()
    _NAV_CACHE[id(t)] = (t, nav)
    return nav


# ------------------------------------------------------------- basic functions

def sync_sep(x: int, y: int, t: AccessTrace, nav: NavIndex | None = None) -> bool:
    nav = nav or trace_nav(t)
    if x > y:
        x, y = y, x
    ax, ay = nav.access(x), nav.access(y)
    if ax.core_id != ay.core_id:
        return False
    if ax.is_rmw or ay.is_rmw:
        return nav.syncs_between(ax.core_id, x, y, "any")
    if ax.is_load:
        return nav.syncs_between(ax.core_id, x, y, "acq")
    return nav.syncs_between(ax.core_id, x, y, "rel")


def reuse_threshold_bytes(cls: DeviceClass, profile: HardwareProfile, params: ScoringParams) -> float:
    return params.reuse_capacity_fraction * profile.cache_capacity_bytes[cls]


def reuse_possible(x: int, y: int, t: AccessTrace, profile: HardwareProfile,
                   params: ScoringParams, nav: NavIndex | None = None) -> bool:
    nav = nav or trace_nav(t)
    if x > y:
        x, y = y, x
    a = nav.access(x)
    n_bytes = nav.unique_words_between(a.core_id, x, y) * t.word_size_bytes
    return n_bytes < reuse_threshold_bytes(a.device_class, profile, params)


def criticality(a: MemoryAccess, profile: HardwareProfile | None = None,
                params: ScoringParams = ScoringParams(), equalized: bool = False) -> float:
    if equalized:
        return params.criticality_default
    critical = a.is_load or (a.is_rmw and not (a.sync is not None and a.sync.releases))
    if not critical:
        return params.criticality_default
    if a.device_class is DeviceClass.CPU:
        return params.criticality_cpu_load
    return params.criticality_gpu_load


# ------------------------------------------------------------------ heuristics

@dataclass
class OwnershipTrace:
    score: float
    scored: int
    result: bool


class Selector:
    """Runs the selection heuristics for one (trace, profile, params) triple."""

    def __init__(self, t: AccessTrace, profile: HardwareProfile | None = None,
                 params: ScoringParams | None = None, equalize_criticality: bool | None = None):
        self.t = t
        self.profile = profile or HardwareProfile(block_size_bytes=t.block_size_bytes,
                                                  word_size_bytes=t.word_size_bytes)
        self.profile.check_trace(t)
        self.params = params or ScoringParams()
        self.nav = trace_nav(t)
        if equalize_criticality is None:
            equalize_criticality = not self.profile.supports_wt_forwarding
        self.equalized = equalize_criticality
        self._rmw = [a.is_rmw for a in t.accesses]
        self._load = [a.is_load for a in t.accesses]
        self._core = [a.core_id for a in t.accesses]
        self._crit: dict[int, float] = {}
        self._masks = [int(WordMask.of(a.word_mask)) for a in t.accesses]
        self._thresh = {c: reuse_threshold_bytes(c, self.profile, self.params) for c in DeviceClass}

    # helpers bound to this trace
    def acc(self, x: int) -> MemoryAccess:
        return self.t.accesses[x]

    def same_core(self, x: Optional[int], y: Optional[int]) -> bool:
        if x is None or y is None:
            return False
        return self.acc(x).core_id == self.acc(y).core_id

    def sync_sep(self, x: int, y: int) -> bool:
        if x > y:
            x, y = y, x
        core = self._core[x]
        if core != self._core[y]:
            return False
        if self._rmw[x] or self._rmw[y]:
            lst = self.nav.sync_any.get(core, ())
        elif self._load[x]:
            lst = self.nav.sync_acq.get(core, ())
        else:
            lst = self.nav.sync_rel.get(core, ())
        k = bisect_right(lst, x)
        return k < len(lst) and lst[k] < y

    def reuse_possible(self, x: int, y: int) -> bool:
        if x > y:
            x, y = y, x
        a = self.acc(x)
        limit_words = self._thresh[a.device_class] / self.t.word_size_bytes
        return self.nav.unique_words_between(a.core_id, x, y, limit_words) < limit_words

    def criticality(self, y: int) -> float:
        c = self._crit.get(y)
        if c is None:
            c = self._crit[y] = criticality(self.acc(y), self.profile, self.params, self.equalized)
        return c

    def ownership_trace(self, x: int, words: Sequence[int] | None = None) -> OwnershipTrace:
        p = self.params
        words = tuple(words) if words is not None else self.nav.words[x]
        cores = self._core
        core_x = cores[x]
        phase = p.ownership_phase_window
        score = 0.0
        scored = 0
        prev_cores = {core_x}
        y, yprev = x, x
        while True:
            y = self.nav.next_conflict(y, words)
            if y is None:
                break
            core_y = cores[y]
            if core_y != cores[yprev] or self.sync_sep(yprev, y):
                phase -= 1
                if phase < 0 or (core_y == core_x and not self.reuse_possible(x, y)):
                    break
                scored += 1
                mult = p.same_core_weight_mult if core_y in prev_cores else p.diff_core_weight_mult
                val = mult * self.criticality(y)
                if core_y == core_x:
                    score += val
                else:
                    score -= val
                    prev_cores.add(core_y)
            yprev = y
        return OwnershipTrace(score, scored, score > 0)

    def ownership_beneficial(self, x: int, words: Sequence[int] | None = None) -> bool:
        return self.ownership_trace(x, words).result

    def shared_state_beneficial(self, x: int) -> bool:
        ax = self.acc(x)
        if not ax.is_load:
            raise ValueError(f"access {x} is not a load")
        if ax.device_class is DeviceClass.GPU:
            return False
        y, yprev = x, x
        while True:
            y = self.nav.next_block_conflict(y)
            if y is None:
                return False
            ay = self.acc(y)
            if ay.core_id != self.acc(yprev).core_id or self.sync_sep(yprev, y):
                if ay.is_load and ay.core_id == ax.core_id:
                    return True
                if not ay.is_load and ay.core_id != ax.core_id:
                    return False
                yprev = y

    def owner_pred_score(self, x: int, words: Sequence[int] | None = None) -> int:
        xprev = self.nav.prev_conf(x, words)
        phase = self.params.ownerpred_phase_window
        score = 0
        a = self.acc(x)
        lst = self.nav.core_kind[(a.core_id, a.kind)]
        k = bisect_left(lst, x)
        for y in lst[max(0, k - phase - 1):k][::-1]:
            phase -= 1
            if phase < 0:
                break
            yprev = self.nav.prev_conf(y)
            score += 1 if self.same_core(yprev, xprev) else -1
        return score

    def owner_pred_beneficial(self, x: int, words: Sequence[int] | None = None) -> bool:
        if not self.profile.supports_owner_prediction:
            return False
        return self.owner_pred_score(x, words) > 0

    # Algorithms 1-3
    def select_load(self, x: int, words: Sequence[int] | None = None) -> RequestType:
        if not self.acc(x).is_load:
            raise ValueError(f"access {x} is not a load")
        if self.ownership_beneficial(x, words):
            return R.ReqO_data
        if self.shared_state_beneficial(x):
            return R.ReqS
        if self.owner_pred_beneficial(x, words):
            return R.ReqVo
        return R.ReqV

    def select_store(self, x: int, words: Sequence[int] | None = None) -> RequestType:
        if not self.acc(x).is_store:
            raise ValueError(f"access {x} is not a store")
        if self.ownership_beneficial(x, words):
            return R.ReqO
        if self.owner_pred_beneficial(x, words):
            return R.ReqWTo
        return R.ReqWTfwd

    def select_rmw(self, x: int, words: Sequence[int] | None = None) -> RequestType:
        if not self.acc(x).is_rmw:
            raise ValueError(f"access {x} is not an RMW")
        if self.ownership_beneficial(x, words):
            return R.ReqO_data
        if self.owner_pred_beneficial(x, words):
            return R.ReqWTo_data
        return R.ReqWTfwd_data

    def select_base(self, x: int, words: Sequence[int] | None = None) -> RequestType:
        a = self.acc(x)
        if a.is_load:
            return self.select_load(x, words)
        if a.is_store:
            return self.select_store(x, words)
        return self.select_rmw(x, words)

    # Algorithm 4 and its masks
    def requested_mask(self, x: int) -> WordMask:
        return WordMask.of(self.acc(x).word_mask)

    def _next_sync(self, core: int, x: int, which: str) -> float:
        table = {"any": self.nav.sync_any, "acq": self.nav.sync_acq, "rel": self.nav.sync_rel}[which]
        lst = table.get(core, ())
        k = bisect_right(lst, x)
        return lst[k] if k < len(lst) else float("inf")

    def _reuse_cutoff(self, x: int, cands: list[int]) -> int:
        """Number of leading candidates still within reuse distance (reuse is monotone)."""
        lo, hi = 0, len(cands)
        if not cands or self.reuse_possible(x, cands[-1]):
            return hi
        while lo < hi:
            mid = (lo + hi) // 2
            if self.reuse_possible(x, cands[mid]):
                lo = mid + 1
            else:
                hi = mid
        return lo

    def _reuse_mask(self, x: int, want_sync_sep: bool) -> WordMask:
        full = (1 << self.t.words_per_block) - 1
        masks = self._masks
        mask = masks[x]
        a = self.acc(x)
        cands = self.nav.future_same_core_block(x)
        cands = cands[:self._reuse_cutoff(x, cands)]
        # sync_sep(x, y) for y > x reduces to comparing y with the next separating sync
        sep_any = self._next_sync(a.core_id, x, "any")
        if a.is_rmw:
            sep_kind = sep_any
        else:
            sep_kind = self._next_sync(a.core_id, x, "acq" if a.is_load else "rel")
        for y in cands:
            if mask == full:
                break
            sep = y > (sep_any if self._rmw[y] else sep_kind)
            if not want_sync_sep and y > sep_any and y > sep_kind:
                break
            if sep == want_sync_sep:
                mask |= masks[y]
        return WordMask(mask)

    def intra_synch_load_reuse(self, x: int) -> WordMask:
        return self._reuse_mask(x, want_sync_sep=False)

    def inter_synch_store_reuse(self, x: int) -> WordMask:
        return self._reuse_mask(x, want_sync_sep=True)

    def select_granularity(self, x: int, rtype: RequestType) -> tuple[RequestType, WordMask]:
        req = self.requested_mask(x)
        if rtype in (R.ReqV, R.ReqVo):
            return rtype, self.intra_synch_load_reuse(x)
        if rtype is R.ReqS:
            return rtype, WordMask.full(self.t.words_per_block)
        if rtype in (R.ReqO, R.ReqO_data):
            mask = self.inter_synch_store_reuse(x)
            if mask != req:
                rtype = R.ReqO_data
            return rtype, mask
        return rtype, req


# module level wrappers with the argument order used elsewhere

def ownership_beneficial(x: int, t: AccessTrace, profile=None, params=None) -> bool:
    return Selector(t, profile, params).ownership_beneficial(x)


def shared_state_beneficial(x: int, t: AccessTrace, profile=None) -> bool:
    return Selector(t, profile).shared_state_beneficial(x)


def owner_pred_beneficial(x: int, t: AccessTrace, profile=None, params=None) -> bool:
    return Selector(t, profile, params).owner_pred_beneficial(x)


# ------------------------------------------------------------------- selection

def vote(types: Iterable[RequestType]) -> RequestType:
    counts = Counter(types)
    if not counts:
        raise ValueError("nothing to vote on")
    return min(counts, key=lambda rt: (-counts[rt], _TIE_RANK[rt]))


def select_for_instruction(accesses: Sequence[MemoryAccess], choices: Sequence[tuple[RequestType, WordMask]]
                           ) -> tuple[RequestType, WordMask]:
    """Combine per-word choices of one dynamic instruction: plurality type, union mask."""
    pcs = {a.static_inst_id for a in accesses}
    if len(pcs) > 1:
        raise ValueError(f"mixed instruction ids {sorted(pcs)}")
    if not choices:
        raise ValueError("no word choices")
    voted = vote(rt for rt, _ in choices)
    mask = WordMask(0)
    for _, m in choices:
        mask = mask | m
    return voted, mask


@dataclass
class SelectionMap:
    entries: dict[int, tuple[RequestType, WordMask]] = field(default_factory=dict)
    instruction_types: dict[int, RequestType] = field(default_factory=dict)
    criticality_equalized: bool = False

    def __getitem__(self, seq: int) -> tuple[RequestType, WordMask]:
        return self.entries[seq]

    def __len__(self) -> int:
        return len(self.entries)

    def type_of(self, seq: int) -> RequestType:
        return self.entries[seq][0]

    def types(self) -> set[RequestType]:
        return {rt for rt, _ in self.entries.values()}

    def check_complete(self, t: AccessTrace) -> None:
        missing = [a.seq_id for a in t.accesses if a.seq_id not in self.entries]
        if missing:
            raise ValueError(f"selection map has no entry for seq ids {missing[:5]}")
        full = WordMask.full(t.words_per_block)
        for a in t.accesses:
            _, m = self.entries[a.seq_id]
            if not m.covers(WordMask.of(a.word_mask)) or not full.covers(m):
                raise ValueError(f"mask for seq {a.seq_id} does not cover its words")


def write_selection(sel: SelectionMap, path) -> None:
    lines = [f"# criticality_equalized {int(sel.criticality_equalized)}"]
    for pc, rt in sorted(sel.instruction_types.items()):
        lines.append(f"# inst {pc} {rt.token}")
    for seq in sorted(sel.entries):
        rt, m = sel.entries[seq]
        lines.append(f"{seq} {rt.token} {int(m):#x}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_selection(path) -> SelectionMap:
    sel = SelectionMap()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        try:
            if parts[0] == "#":
                if parts[1] == "criticality_equalized":
                    sel.criticality_equalized = bool(int(parts[2]))
                elif parts[1] == "inst":
                    sel.instruction_types[int(parts[2])] = RequestType.from_token(parts[3])
                continue
            seq, tok, mask = parts
            sel.entries[int(seq)] = (RequestType.from_token(tok), WordMask(int(mask, 16)))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return sel


def _uses_ownership(sel: SelectionMap, seq: Optional[int]) -> bool:
    return seq is not None and sel.entries[seq][0].ownership


def lower_to_profile(sel: SelectionMap, t: AccessTrace, profile: HardwareProfile) -> SelectionMap:
    if not profile.supports_wt_forwarding and not sel.criticality_equalized:
        raise ValueError("no-forwarding profiles need selection with equalized criticality")
    nav = trace_nav(t)
    out: dict[int, tuple[RequestType, WordMask]] = {}
    full = WordMask.full(t.words_per_block)
    for seq, (rt, mask) in sel.entries.items():
        a = t.accesses[seq]
        if not profile.supports_owner_prediction:
            rt = {R.ReqVo: R.ReqV, R.ReqWTo: R.ReqWT, R.ReqWTo_data: R.ReqWT_data}.get(rt, rt)
        if not profile.supports_wt_forwarding:
            if rt in (R.ReqWTfwd, R.ReqWTo):
                rt = R.ReqWT
            elif rt in (R.ReqWTfwd_data, R.ReqWTo_data):
                both = _uses_ownership(sel, nav.prev_conf(seq)) and _uses_ownership(sel, nav.next_conflict(seq))
                rt = R.ReqO_data if both else R.ReqWT_data
        if not profile.word_granularity_state.get(a.device_class, True):
            mask = full
            if rt is R.ReqO:
                rt = R.ReqO_data
        out[seq] = (rt, mask)
    inst = {}
    for pc, rt in sel.instruction_types.items():
        inst[pc] = rt
    return SelectionMap(out, inst, sel.criticality_equalized)


def select_all(t: AccessTrace, profile: HardwareProfile | None = None, params: ScoringParams | None = None,
               per_instruction: bool = True, lower: bool = True) -> SelectionMap:
    """Select a request type and mask for every access.

    With ``per_instruction`` the dynamic instances of each static instruction
    vote and every instance is issued with the winning type, as an ISA-level
    annotation would be.
    """
    s = Selector(t, profile, params)
    base: dict[int, RequestType] = {}
    for a in t.accesses:
        words = s.nav.words[a.seq_id]
        if len(words) == 1:
            base[a.seq_id] = s.select_base(a.seq_id)
        else:
            base[a.seq_id] = vote(s.select_base(a.seq_id, (w,)) for w in words)
    inst: dict[int, RequestType] = {}
    by_pc: dict[int, list[RequestType]] = defaultdict(list)
    for a in t.accesses:
        by_pc[a.static_inst_id].append(base[a.seq_id])
    for pc, lst in by_pc.items():
        inst[pc] = vote(lst)
    entries = {}
    for a in t.accesses:
        rt = inst[a.static_inst_id] if per_instruction else base[a.seq_id]
        entries[a.seq_id] = s.select_granularity(a.seq_id, rt)
    sel = SelectionMap(entries, inst, s.equalized)
    return lower_to_profile(sel, t, s.profile) if lower else sel
