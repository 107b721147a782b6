"""Memory-trace model, text file format, validation and microbenchmark generators.

A trace is a single sequentially consistent total order of dynamic memory
accesses.  Synchronization is encoded as RMW accesses carrying Acquire or
Release semantics on small flag words.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence


class DeviceClass(Enum):
    CPU = "CPU"
    GPU = "GPU"


class AccessKind(Enum):
    LOAD = "Load"
    STORE = "Store"
    RMW = "RMW"


class SyncKind(Enum):
    ACQUIRE = "Acquire"
    RELEASE = "Release"
    ACQ_REL = "AcqRel"

    @property
    def acquires(self) -> bool:
        return self in (SyncKind.ACQUIRE, SyncKind.ACQ_REL)

    @property
    def releases(self) -> bool:
        return self in (SyncKind.RELEASE, SyncKind.ACQ_REL)


class TraceFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class MemoryAccess:
    seq_id: int
    core_id: int
    device_class: DeviceClass
    kind: AccessKind
    address: int
    word_mask: frozenset[int]
    static_inst_id: int
    sync: Optional[SyncKind] = None
    data_value: Optional[tuple[int, ...]] = None

    @property
    def is_load(self) -> bool:
        return self.kind is AccessKind.LOAD

    @property
    def is_store(self) -> bool:
        return self.kind is AccessKind.STORE

    @property
    def is_rmw(self) -> bool:
        return self.kind is AccessKind.RMW

    @property
    def is_sync(self) -> bool:
        return self.sync is not None


@dataclass
class AccessTrace:
    accesses: list[MemoryAccess] = field(default_factory=list)
    block_size_bytes: int = 64
    word_size_bytes: int = 4
    core_table: dict[int, DeviceClass] = field(default_factory=dict)
    inst_names: dict[int, str] = field(default_factory=dict)

    def inst_id(self, name: str) -> int:
        for pc, n in self.inst_names.items():
            if n == name:
                return pc
        raise KeyError(name)

    @property
    def words_per_block(self) -> int:
        return self.block_size_bytes // self.word_size_bytes

    def block_of(self, a: MemoryAccess) -> int:
        return a.address // self.block_size_bytes

    def word_ids(self, a: MemoryAccess) -> list[int]:
        """Global word indices touched by ``a``, ascending."""
        base = self.block_of(a) * self.words_per_block
        return [base + off for off in sorted(a.word_mask)]

    def __len__(self) -> int:
        return len(self.accesses)

    def __iter__(self):
        return iter(self.accesses)


@dataclass
class ValidationReport:
    problems: list[tuple[tuple[int, ...], str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def add(self, seq_ids: Iterable[int], msg: str) -> None:
        self.problems.append((tuple(seq_ids), msg))

    def __str__(self) -> str:
        if self.ok:
            return "pass"
        return "\n".join(f"{list(ids)}: {m}" for ids, m in self.problems)


def validate_trace(t: AccessTrace) -> ValidationReport:
    rep = ValidationReport()
    if t.word_size_bytes <= 0 or t.block_size_bytes <= 0:
        rep.add([], "block and word sizes must be positive")
        return rep
    if t.block_size_bytes % t.word_size_bytes:
        rep.add([], "block_size_bytes is not a multiple of word_size_bytes")
        return rep
    wpb = t.words_per_block
    seen: dict[int, int] = {}
    for idx, a in enumerate(t.accesses):
        if a.seq_id in seen:
            rep.add([seen[a.seq_id], a.seq_id], f"duplicate seq_id {a.seq_id}")
        seen.setdefault(a.seq_id, a.seq_id)
        if a.seq_id != idx:
            rep.add([a.seq_id], f"seq_id {a.seq_id} at position {idx} (ids must be dense and ordered)")
        if not a.word_mask:
            rep.add([a.seq_id], "empty word mask")
        elif min(a.word_mask) < 0 or max(a.word_mask) >= wpb:
            rep.add([a.seq_id], "word mask outside the containing block")
        if a.address < 0:
            rep.add([a.seq_id], "negative address")
        elif a.word_mask and (a.address % t.block_size_bytes) // t.word_size_bytes not in a.word_mask:
            rep.add([a.seq_id], "address word is not part of the word mask")
        if a.sync is not None and a.kind is not AccessKind.RMW:
            rep.add([a.seq_id], f"sync {a.sync.value} on a {a.kind.value} access")
        if a.kind is not AccessKind.LOAD:
            if a.data_value is None or len(a.data_value) != len(a.word_mask):
                rep.add([a.seq_id], "stores and RMWs need one data value per masked word")
        elif a.data_value is not None and len(a.data_value) != len(a.word_mask):
            rep.add([a.seq_id], "expected-value count does not match word mask")
        cls = t.core_table.get(a.core_id)
        if cls is None:
            rep.add([a.seq_id], f"core {a.core_id} missing from core table")
        elif cls is not a.device_class:
            rep.add([a.seq_id], f"core {a.core_id} device class mismatch")
    return rep


# ---------------------------------------------------------------- file format

_SYNC_TOKENS = {None: "-", **{s: s.value for s in SyncKind}}
_SYNC_PARSE = {v: k for k, v in _SYNC_TOKENS.items()}
_KIND_PARSE = {k.value: k for k in AccessKind}
_CLASS_PARSE = {c.value: c for c in DeviceClass}


def format_access(a: MemoryAccess) -> str:
    mask = sum(1 << w for w in a.word_mask)
    value = "-" if a.data_value is None else ",".join(str(v) for v in a.data_value)
    return (f"{a.seq_id} {a.core_id} {a.device_class.value} {a.kind.value} "
            f"{a.address:#x} {mask:#x} {a.static_inst_id} {_SYNC_TOKENS[a.sync]} {value}")


def write_trace(t: AccessTrace, path) -> None:
    lines = [f"# block_size {t.block_size_bytes}", f"# word_size {t.word_size_bytes}"]
    for core, cls in sorted(t.core_table.items()):
        lines.append(f"# core {core} {cls.value}")
    for pc, name in sorted(t.inst_names.items()):
        lines.append(f"# inst {pc} {name}")
    lines.extend(format_access(a) for a in t.accesses)
    lines.append(f"# end {len(t.accesses)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_access(fields: list[str], lineno: int) -> MemoryAccess:
    if len(fields) != 9:
        raise TraceFormatError(f"expected 9 fields, got {len(fields)}", lineno)
    seq, core, cls, kind, addr, mask, pc, sync, value = fields
    if cls not in _CLASS_PARSE:
        raise TraceFormatError(f"unknown device class token {cls!r}", lineno)
    if kind not in _KIND_PARSE:
        raise TraceFormatError(f"unknown kind token {kind!r}", lineno)
    if sync not in _SYNC_PARSE:
        raise TraceFormatError(f"unknown sync token {sync!r}", lineno)
    try:
        m = int(mask, 16)
        words = frozenset(i for i in range(m.bit_length()) if m >> i & 1)
        data = None if value == "-" else tuple(int(v) for v in value.split(","))
        return MemoryAccess(int(seq), int(core), _CLASS_PARSE[cls], _KIND_PARSE[kind],
                            int(addr, 16), words, int(pc), _SYNC_PARSE[sync], data)
    except ValueError as exc:
        raise TraceFormatError(f"bad numeric field ({exc})", lineno) from None


def read_trace(path) -> AccessTrace:
    t = AccessTrace()
    ended = False
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if ended:
            raise TraceFormatError("content after end marker", lineno)
        if line.startswith("#"):
            parts = line[1:].split()
            if not parts:
                continue
            key = parts[0]
            try:
                if key == "block_size":
                    t.block_size_bytes = int(parts[1])
                elif key == "word_size":
                    t.word_size_bytes = int(parts[1])
                elif key == "core":
                    if parts[2] not in _CLASS_PARSE:
                        raise TraceFormatError(f"unknown device class token {parts[2]!r}", lineno)
                    t.core_table[int(parts[1])] = _CLASS_PARSE[parts[2]]
                elif key == "inst":
                    t.inst_names[int(parts[1])] = parts[2]
                elif key == "end":
                    if int(parts[1]) != len(t.accesses):
                        raise TraceFormatError(
                            f"end marker says {parts[1]} records, read {len(t.accesses)}", lineno)
                    ended = True
            except (IndexError, ValueError):
                raise TraceFormatError(f"malformed header {line!r}", lineno) from None
            continue
        t.accesses.append(_parse_access(line.split(), lineno))
    if not ended:
        raise TraceFormatError(f"truncated file: no end marker after {len(t.accesses)} records",
                               len(t.accesses))
    return t


# ---------------------------------------------------------------- generators

SPARSE_RATIO = 16  # one sparse access per this many dense ones


@dataclass(frozen=True)
class MicrobenchParams:
    n_cpu_cores: int = 2
    n_gpu_cores: int = 8
    partition_words: int = 256
    iterations: int = 5
    seed: int = 0
    block_size_bytes: int = 64
    word_size_bytes: int = 4
    address_space_words: int = 1 << 22

    def check(self, need_cpu: bool = True) -> None:
        if need_cpu and self.n_cpu_cores < 1:
            raise ValueError("n_cpu_cores must be positive")
        for name in ("n_gpu_cores", "partition_words", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.block_size_bytes % self.word_size_bytes:
            raise ValueError("block size must be a multiple of word size")
        if self.partition_words * (self.n_cpu_cores + self.n_gpu_cores) > self.address_space_words:
            raise ValueError("partitions do not fit in the address space")

    @property
    def n_partitions(self) -> int:
        return max(self.n_cpu_cores, self.n_gpu_cores)


class _Builder:
    """Accumulates accesses with dense seq ids and stable static instruction ids."""

    def __init__(self, p: MicrobenchParams, n_flags: int):
        self.p = p
        self.wpb = p.block_size_bytes // p.word_size_bytes
        self.accesses: list[MemoryAccess] = []
        self.core_table: dict[int, DeviceClass] = {}
        self.pcs: dict[str, int] = {}
        # flags each get their own block; arrays start block aligned after them
        self.flag_base = 0
        self.array_base_word = n_flags * self.wpb
        self.array_words = self._round_up(p.n_partitions * p.partition_words)

    def _round_up(self, n: int) -> int:
        return -(-n // self.wpb) * self.wpb

    def pc(self, name: str) -> int:
        return self.pcs.setdefault(name, 0x100 + 4 * len(self.pcs))

    def add_core(self, core: int, cls: DeviceClass) -> None:
        self.core_table[core] = cls

    def word_addr(self, array: int, part: int, idx: int) -> int:
        w = self.array_base_word + array * self.array_words + part * self.p.partition_words + idx
        return w * self.p.word_size_bytes

    def flag_addr(self, flag: int) -> int:
        return self.flag_base + flag * self.p.block_size_bytes

    def emit(self, core: int, kind: AccessKind, addr: int, pc: str,
             sync: SyncKind | None = None, value: int | None = None) -> None:
        seq = len(self.accesses)
        off = (addr % self.p.block_size_bytes) // self.p.word_size_bytes
        if kind is AccessKind.STORE and value is None:
            value = seq + 1
        data = None if value is None else (value,)
        self.accesses.append(MemoryAccess(seq, core, self.core_table[core], kind, addr,
                                          frozenset([off]), self.pc(pc), sync, data))

    def trace(self) -> AccessTrace:
        return AccessTrace(self.accesses, self.p.block_size_bytes, self.p.word_size_bytes,
                           dict(self.core_table), {pc: n for n, pc in self.pcs.items()})


def _owned_partitions(i: int, n: int, parts: int) -> list[int]:
    return [p for p in range(parts) if p % n == i]


def _cores(p: MicrobenchParams) -> tuple[list[int], list[int]]:
    cpus = list(range(p.n_cpu_cores))
    gpus = list(range(p.n_cpu_cores, p.n_cpu_cores + p.n_gpu_cores))
    return cpus, gpus


def _phase_sync(b: _Builder, core: int, flags: Sequence[int], sync: SyncKind, tag: str) -> None:
    for f in flags:
        b.emit(core, AccessKind.RMW, b.flag_addr(f), f"{tag}.{sync.value.lower()}", sync, 1)


def _flag_ids(p: MicrobenchParams, i: int, n: int) -> tuple[list[int], list[int]]:
    """Flags a core of a class with ``n`` members uses: (cpu->gpu, gpu->cpu) per partition."""
    parts = _owned_partitions(i, n, p.n_partitions)
    return [2 * q for q in parts], [2 * q + 1 for q in parts]


def _sparse_count(words: int) -> int:
    return max(1, words // SPARSE_RATIO)


def _spread_indices(rng: random.Random, words: int, wpb: int) -> list[int]:
    """One seeded word per block-sized chunk, across the whole partition."""
    out = []
    for start in range(0, words, wpb):
        out.append(start + rng.randrange(min(wpb, words - start)))
    n = _sparse_count(words)
    if len(out) > n:
        out = sorted(rng.sample(out, n))
    return out


def _clustered_indices(rng: random.Random, words: int, wpb: int) -> list[int]:
    """Seeded words confined to one randomly chosen block of the partition."""
    nblocks = -(-words // wpb)
    blk = rng.randrange(nblocks)
    lo, hi = blk * wpb, min(words, (blk + 1) * wpb)
    n = min(_sparse_count(words), hi - lo)
    return sorted(rng.sample(range(lo, hi), n))


A_ARRAY, B_ARRAY = 0, 1


def generate_flex_v_s(p: MicrobenchParams) -> AccessTrace:
    """CPUs re-read a shared A partition every phase and stream a rotating B
    partition; GPUs own B and sprinkle sparse stores into A."""
    p.check()
    cpus, gpus = _cores(p)
    nparts = p.n_partitions
    b = _Builder(p, 2 * nparts)
    for c in cpus:
        b.add_core(c, DeviceClass.CPU)
    for g in gpus:
        b.add_core(g, DeviceClass.GPU)
    rng = random.Random(p.seed)
    W = p.partition_words
    for it in range(p.iterations):
        for i, c in enumerate(cpus):
            c2g, g2c = _flag_ids(p, i, len(cpus))
            _phase_sync(b, c, g2c, SyncKind.ACQUIRE, "cpu")
            a_part = i // 2
            for j in range(W):
                b.emit(c, AccessKind.LOAD, b.word_addr(A_ARRAY, a_part, j), "cpu.ld_a")
            # spread CPUs evenly so each B partition is revisited as rarely as possible
            b_part = (i * (nparts // len(cpus)) + it) % nparts
            for j in range(W):
                b.emit(c, AccessKind.LOAD, b.word_addr(B_ARRAY, b_part, j), "cpu.ld_b")
            _phase_sync(b, c, c2g, SyncKind.RELEASE, "cpu")
        for i, g in enumerate(gpus):
            c2g, g2c = _flag_ids(p, i, len(gpus))
            _phase_sync(b, g, c2g, SyncKind.ACQUIRE, "gpu")
            sparse = _clustered_indices(rng, W, b.wpb)
            a_part = (i + it) % nparts
            slots = _spread_slots(len(sparse), W)
            for j in range(W):
                for part in _owned_partitions(i, len(gpus), nparts):
                    addr = b.word_addr(B_ARRAY, part, j)
                    b.emit(g, AccessKind.STORE, addr, "gpu.st_b")
                    b.emit(g, AccessKind.LOAD, addr, "gpu.ld_b")
                for k in slots.get(j, ()):
                    b.emit(g, AccessKind.STORE, b.word_addr(A_ARRAY, a_part, sparse[k]), "gpu.st_a")
            _phase_sync(b, g, g2c, SyncKind.RELEASE, "gpu")
    return b.trace()


def _spread_slots(n: int, W: int) -> dict[int, list[int]]:
    """Interleave ``n`` sparse accesses evenly through a dense loop of ``W`` steps."""
    slots: dict[int, list[int]] = {}
    for k in range(n):
        slots.setdefault(min(W - 1, (k + 1) * W // n - 1), []).append(k)
    return slots


def generate_flex_o_wt(p: MicrobenchParams) -> AccessTrace:
    """Dense read+write of an owned partition, then sparse writes into a
    rotating remote partition; CPUs own A, GPUs own B."""
    p.check()
    cpus, gpus = _cores(p)
    nparts = p.n_partitions
    b = _Builder(p, 2 * nparts)
    for c in cpus:
        b.add_core(c, DeviceClass.CPU)
    for g in gpus:
        b.add_core(g, DeviceClass.GPU)
    rng = random.Random(p.seed)
    W = p.partition_words
    for it in range(p.iterations):
        for cls_cores, dense_arr, sparse_arr, tag in ((cpus, A_ARRAY, B_ARRAY, "cpu"),
                                                       (gpus, B_ARRAY, A_ARRAY, "gpu")):
            for i, core in enumerate(cls_cores):
                c2g, g2c = _flag_ids(p, i, len(cls_cores))
                acq, rel = (g2c, c2g) if tag == "cpu" else (c2g, g2c)
                _phase_sync(b, core, acq, SyncKind.ACQUIRE, tag)
                for part in _owned_partitions(i, len(cls_cores), nparts):
                    for j in range(W):
                        addr = b.word_addr(dense_arr, part, j)
                        b.emit(core, AccessKind.LOAD, addr, f"{tag}.ld_dense")
                        b.emit(core, AccessKind.STORE, addr, f"{tag}.st_dense")
                target = (i + it) % nparts
                for j in _spread_indices(rng, W, b.wpb):
                    b.emit(core, AccessKind.STORE, b.word_addr(sparse_arr, target, j), f"{tag}.st_sparse")
                _phase_sync(b, core, rel, SyncKind.RELEASE, tag)
    return b.trace()


def generate_flex_oa_wta(p: MicrobenchParams) -> AccessTrace:
    """GPU-only racy atomics: dense RMWs on the local partition, sparse RMWs
    on one seeded remote partition per iteration."""
    p.check(need_cpu=False)
    gpus = list(range(p.n_gpu_cores))
    b = _Builder(p, len(gpus))
    for g in gpus:
        b.add_core(g, DeviceClass.GPU)
    rng = random.Random(p.seed)
    W = p.partition_words
    n = len(gpus)
    for it in range(p.iterations):
        for g in gpus:
            b.emit(g, AccessKind.RMW, b.flag_addr(g), "iter.acquire", SyncKind.ACQUIRE, 1)
            for j in range(W):
                b.emit(g, AccessKind.RMW, b.word_addr(A_ARRAY, g, j), "rmw.dense", value=1 + j % 3)
            if n > 1:
                remote = (g + 1 + rng.randrange(n - 1)) % n
                for j in _spread_indices(rng, W, b.wpb):
                    b.emit(g, AccessKind.RMW, b.word_addr(A_ARRAY, remote, j), "rmw.sparse", value=1 + g)
            b.emit(g, AccessKind.RMW, b.flag_addr(g), "iter.release", SyncKind.RELEASE, 1)
    return b.trace()


def generate_prod_cons(p: MicrobenchParams) -> AccessTrace:
    """CPUs read A and produce B; GPUs read B and produce A, fixed partitions."""
    p.check()
    cpus, gpus = _cores(p)
    nparts = p.n_partitions
    b = _Builder(p, 2 * nparts)
    for c in cpus:
        b.add_core(c, DeviceClass.CPU)
    for g in gpus:
        b.add_core(g, DeviceClass.GPU)
    W = p.partition_words
    for it in range(p.iterations):
        for cls_cores, rd, wr, tag in ((cpus, A_ARRAY, B_ARRAY, "cpu"), (gpus, B_ARRAY, A_ARRAY, "gpu")):
            for i, core in enumerate(cls_cores):
                c2g, g2c = _flag_ids(p, i, len(cls_cores))
                acq, rel = (g2c, c2g) if tag == "cpu" else (c2g, g2c)
                _phase_sync(b, core, acq, SyncKind.ACQUIRE, tag)
                parts = _owned_partitions(i, len(cls_cores), nparts)
                for part in parts:
                    for j in range(W):
                        b.emit(core, AccessKind.LOAD, b.word_addr(rd, part, j), f"{tag}.ld")
                for part in parts:
                    for j in range(W):
                        b.emit(core, AccessKind.STORE, b.word_addr(wr, part, j), f"{tag}.st")
                _phase_sync(b, core, rel, SyncKind.RELEASE, tag)
    return b.trace()


GENERATORS = {
    "flex-v-s": generate_flex_v_s,
    "flex-o-wt": generate_flex_o_wt,
    "flex-oa-wta": generate_flex_oa_wta,
    "prod-cons": generate_prod_cons,
}


def generate(name: str, p: MicrobenchParams) -> AccessTrace:
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown benchmark {name!r}; choose from {', '.join(GENERATORS)}") from None
    return gen(p)


def release_acquire_separated(t: AccessTrace, i: int, j: int) -> bool:
    """True if a Release by X's core and a later Acquire by Y's core lie between positions i < j."""
    x, y = t.accesses[i], t.accesses[j]
    seen_release = False
    for a in t.accesses[i + 1:j]:
        if a.sync is None:
            continue
        if not seen_release and a.core_id == x.core_id and a.sync.releases:
            seen_release = True
        elif seen_release and a.core_id == y.core_id and a.sync.acquires:
            return True
    return False


def phase_index(t: AccessTrace) -> list[int]:
    """Per seq id, how many acquire-bracketed phases its core has started before it (0-based).

    Back-to-back acquires open a single phase, so in the generated
    benchmarks this is the iteration number.
    """
    out = [0] * len(t.accesses)
    phase: dict[int, int] = {}
    prev_acq: dict[int, bool] = {}
    for a in t.accesses:
        acq = a.sync is not None and a.sync.acquires
        if acq and not prev_acq.get(a.core_id, False):
            phase[a.core_id] = phase.get(a.core_id, 0) + 1
        prev_acq[a.core_id] = acq
        out[a.seq_id] = max(0, phase.get(a.core_id, 0) - 1)
    return out
