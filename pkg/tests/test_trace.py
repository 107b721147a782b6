from collections import defaultdict

import pytest

from conftest import SMALL, seqs_of
from fcssim.trace import (AccessKind, AccessTrace, DeviceClass, MemoryAccess, MicrobenchParams, SyncKind,
                          TraceFormatError, generate, phase_index, read_trace, release_acquire_separated,
                          validate_trace, write_trace)


def _acc(seq, core=0, kind=AccessKind.LOAD, addr=0, sync=None, value=None):
    data = None if value is None else (value,)
    return MemoryAccess(seq, core, DeviceClass.CPU, kind, addr, frozenset([(addr % 64) // 4]), 1, sync, data)


def _trace(accs):
    return AccessTrace(accs, 64, 4, {a.core_id: DeviceClass.CPU for a in accs} or {0: DeviceClass.CPU}, {1: "x"})


def _phases(t, core):
    """Split a core's accesses into acquire-bracketed phases by plain scanning."""
    out, cur, prev_acq = [], None, False
    for a in t.accesses:
        if a.core_id != core:
            continue
        acq = a.sync is not None and a.sync.acquires
        if acq and not prev_acq:
            cur = []
            out.append(cur)
        prev_acq = acq
        if a.sync is None:
            cur.append(a)
    return out


def test_empty_trace_validates():
    assert validate_trace(_trace([])).ok


def test_duplicate_seq_named_in_report():
    rep = validate_trace(_trace([_acc(0), _acc(0, addr=4)]))
    assert not rep.ok
    assert any(ids == (0, 0) and "duplicate" in msg for ids, msg in rep.problems)


def test_sync_on_plain_load_rejected():
    rep = validate_trace(_trace([_acc(0, sync=SyncKind.ACQUIRE)]))
    assert any("sync" in msg for _, msg in rep.problems)


def test_store_without_value_rejected():
    rep = validate_trace(_trace([_acc(0, kind=AccessKind.STORE)]))
    assert not rep.ok


@pytest.mark.parametrize("name", ["flex-v-s", "flex-o-wt", "flex-oa-wta", "prod-cons"])
def test_generated_traces_validate(small_traces, name):
    assert validate_trace(small_traces[name]).ok


@pytest.mark.parametrize("name", ["flex-v-s", "flex-o-wt", "flex-oa-wta", "prod-cons"])
def test_generators_are_deterministic(small_traces, name):
    assert generate(name, SMALL).accesses == small_traces[name].accesses


def test_seed_changes_sparse_choice():
    a = generate("flex-o-wt", SMALL)
    b = generate("flex-o-wt", MicrobenchParams(2, 2, 32, 3, seed=7))
    assert a.accesses != b.accesses


@pytest.mark.parametrize("name", ["flex-v-s", "flex-o-wt", "prod-cons"])
def test_plain_conflicts_are_sync_separated(small_traces, name):
    t = small_traces[name]
    by_word = defaultdict(list)
    for a in t.accesses:
        if a.kind is not AccessKind.RMW:
            by_word[a.address].append(a)
    for accs in by_word.values():
        for i, x in enumerate(accs):
            for y in accs[i + 1:]:
                if x.core_id == y.core_id or (x.kind is AccessKind.LOAD and y.kind is AccessKind.LOAD):
                    continue
                # brute force: look for release by x's core then acquire by y's core
                between = t.accesses[x.seq_id + 1:y.seq_id]
                rel = next((a.seq_id for a in between if a.sync and a.sync.releases and a.core_id == x.core_id), None)
                assert rel is not None, (x, y)
                assert any(a.sync and a.sync.acquires and a.core_id == y.core_id and a.seq_id > rel for a in between)
                assert release_acquire_separated(t, x.seq_id, y.seq_id)


def test_flex_v_s_tiny_cpu_phase():
    t = generate("flex-v-s", MicrobenchParams(1, 1, 4, 1))
    (phase,) = _phases(t, 0)
    names = [t.inst_names[a.static_inst_id] for a in phase]
    assert names.count("cpu.ld_a") == 4 and names.count("cpu.ld_b") == 4


def test_flex_v_s_partitions_across_phases():
    t = generate("flex-v-s", MicrobenchParams(2, 2, 4, 2))
    a_pc, b_pc = t.inst_id("cpu.ld_a"), t.inst_id("cpu.ld_b")
    p1, p2 = _phases(t, 0)
    assert {a.address for a in p1 if a.static_inst_id == a_pc} == {a.address for a in p2 if a.static_inst_id == a_pc}
    b1 = {a.address for a in p1 if a.static_inst_id == b_pc}
    b2 = {a.address for a in p2 if a.static_inst_id == b_pc}
    assert not b1 & b2
    # next partition along: the base moves by one partition width
    assert min(b2) - min(b1) == 4 * 4


def test_gpu_stores_to_a_follow_a_cpu_release(small_traces):
    t = small_traces["flex-v-s"]
    st_a = set(seqs_of(t, "gpu.st_a"))
    cpu_cores = {c for c, cls in t.core_table.items() if cls is DeviceClass.CPU}
    first_release = min(a.seq_id for a in t.accesses if a.sync and a.sync.releases and a.core_id in cpu_cores)
    assert st_a and min(st_a) > first_release


def test_flex_o_wt_dense_fixed_sparse_rotates():
    t = generate("flex-o-wt", MicrobenchParams(2, 2, 32, 2))
    dense, sparse = t.inst_id("cpu.ld_dense"), t.inst_id("cpu.st_sparse")
    p1, p2 = _phases(t, 0)
    assert {a.address for a in p1 if a.static_inst_id == dense} == {a.address for a in p2 if a.static_inst_id == dense}
    part = lambda a: (a.address // 4 - 4 * 16) // 32  # noqa: E731  (4 flag blocks precede the arrays)
    assert {part(a) for a in p1 if a.static_inst_id == sparse} != {part(a) for a in p2 if a.static_inst_id == sparse}
    # read+write pairs on the dense partition
    kinds = [a.kind for a in p1 if t.inst_names[a.static_inst_id].endswith("dense")]
    assert kinds[:2] == [AccessKind.LOAD, AccessKind.STORE]


def test_flex_o_wt_gpu_mirrors_arrays(small_traces):
    t = small_traces["flex-o-wt"]
    cpu_dense = {a.address for a in t.accesses if a.static_inst_id == t.inst_id("cpu.st_dense")}
    gpu_sparse = {a.address for a in t.accesses if a.static_inst_id == t.inst_id("gpu.st_sparse")}
    gpu_dense = {a.address for a in t.accesses if a.static_inst_id == t.inst_id("gpu.st_dense")}
    assert gpu_sparse <= cpu_dense
    assert not gpu_dense & cpu_dense


def test_flex_oa_wta_structure():
    t = generate("flex-oa-wta", MicrobenchParams(n_cpu_cores=0, n_gpu_cores=2, partition_words=32, iterations=1))
    assert all(a.kind is AccessKind.RMW for a in t.accesses)
    dense = [a for a in t.accesses if a.core_id == 0 and t.inst_names[a.static_inst_id] == "rmw.dense"]
    sparse = [a for a in t.accesses if a.core_id == 0 and t.inst_names[a.static_inst_id] == "rmw.sparse"]
    assert len({a.address for a in dense}) == 32
    assert sparse and not {a.address for a in sparse} & {a.address for a in dense}


def test_flex_oa_wta_one_remote_partition_per_phase():
    t = generate("flex-oa-wta", MicrobenchParams(n_cpu_cores=0, n_gpu_cores=4, partition_words=64, iterations=4))
    sparse = t.inst_id("rmw.sparse")
    per_phase = defaultdict(set)
    phases = phase_index(t)
    for a in t.accesses:
        if a.static_inst_id == sparse:
            per_phase[(a.core_id, phases[a.seq_id])].add((a.address // 4 - 4 * 16) // 64)  # 4 flag blocks, then 64-word partitions
    assert per_phase and all(len(parts) == 1 for parts in per_phase.values())


def test_prod_cons_counts():
    t = generate("prod-cons", MicrobenchParams(1, 1, 4, 2))
    cpu = [a for a in t.accesses if a.core_id == 0 and a.sync is None]
    assert sum(a.kind is AccessKind.LOAD for a in cpu) == 8
    assert sum(a.kind is AccessKind.STORE for a in cpu) == 8
    gpu = [a for a in t.accesses if a.core_id == 1 and a.sync is None]
    assert sum(a.kind is AccessKind.LOAD for a in gpu) == 8 and sum(a.kind is AccessKind.STORE for a in gpu) == 8


def test_prod_cons_gpu_writes_read_next_iteration(small_traces):
    t = small_traces["prod-cons"]
    phases = phase_index(t)
    gpu_st = defaultdict(set)
    cpu_ld = defaultdict(set)
    for a in t.accesses:
        name = t.inst_names[a.static_inst_id]
        if name == "gpu.st":
            gpu_st[phases[a.seq_id]].add(a.address)
        elif name == "cpu.ld":
            cpu_ld[phases[a.seq_id]].add(a.address)
    for it in range(SMALL.iterations - 1):
        assert gpu_st[it] <= cpu_ld[it + 1]


def test_round_trip(tmp_path, small_traces):
    for name, t in small_traces.items():
        p = tmp_path / f"{name}.trace"
        write_trace(t, p)
        back = read_trace(p)
        assert back.accesses == t.accesses
        assert back.core_table == t.core_table and back.inst_names == t.inst_names


def test_truncated_record_reports_line(tmp_path, small_traces):
    p = tmp_path / "t.trace"
    write_trace(small_traces["prod-cons"], p)
    lines = p.read_text().splitlines()
    bad = len(lines) - 2  # last record, just above the end marker
    lines[bad] = " ".join(lines[bad].split()[:4])
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceFormatError, match=f"line {bad + 1}"):
        read_trace(p)


def test_unknown_kind_named(tmp_path, small_traces):
    p = tmp_path / "t.trace"
    write_trace(small_traces["prod-cons"], p)
    text = p.read_text().replace(" Load ", " Fetch ", 1)
    p.write_text(text)
    with pytest.raises(TraceFormatError, match="Fetch"):
        read_trace(p)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        generate("prod-cons", MicrobenchParams(partition_words=0))
    with pytest.raises(ValueError, match="unknown benchmark"):
        generate("nope", SMALL)


def test_phase_index_counts_acquire_runs(small_traces):
    t = small_traces["prod-cons"]
    idx = phase_index(t)
    for core in t.core_table:
        seen = sorted({idx[a.seq_id] for a in t.accesses if a.core_id == core})
        assert seen == list(range(SMALL.iterations))
