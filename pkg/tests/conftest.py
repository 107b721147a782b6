from collections import Counter

import pytest

from fcssim.trace import AccessKind, AccessTrace, DeviceClass, MemoryAccess, MicrobenchParams, generate

SMALL = MicrobenchParams(n_cpu_cores=2, n_gpu_cores=2, partition_words=32, iterations=3)


def by_inst(t, sel=None):
    """(instruction name, kind or type token) -> count."""
    c = Counter()
    for a in t.accesses:
        name = t.inst_names[a.static_inst_id]
        c[(name, sel.entries[a.seq_id][0].token if sel else a.kind.value)] += 1
    return c


def seqs_of(t, name):
    pc = t.inst_id(name)
    return [a.seq_id for a in t.accesses if a.static_inst_id == pc]


@pytest.fixture(scope="session")
def small_traces():
    from fcssim.trace import GENERATORS
    return {name: generate(name, SMALL) for name in GENERATORS}


FLAG = 1000  # a word in its own block


def mk(rows, classes=None):
    """Hand-built trace. rows: (core, kind, word[, sync[, pc[, value]]]); 16 words per 64-byte block."""
    classes = classes or {}
    accs = []
    for seq, row in enumerate(rows):
        core, kind, word = row[:3]
        sync = row[3] if len(row) > 3 else None
        pc = row[4] if len(row) > 4 else seq
        value = row[5] if len(row) > 5 else 1
        data = None if kind is AccessKind.LOAD else (value,)
        accs.append(MemoryAccess(seq, core, classes.get(core, DeviceClass.CPU), kind, word * 4,
                                 frozenset([word % 16]), pc, sync, data))
    table = {r[0]: classes.get(r[0], DeviceClass.CPU) for r in rows}
    return AccessTrace(accs, 64, 4, table, {a.static_inst_id: f"i{a.static_inst_id}" for a in accs})
