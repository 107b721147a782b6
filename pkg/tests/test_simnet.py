import pytest

from conftest import FLAG, mk
from fcssim.selector import RequestType as R
from fcssim.selector import SelectionMap, WordMask
from fcssim.simnet import (CSV_COLUMNS, NAMED_CONFIGS, Metrics, SimConfig, SimulationError, emit_metrics,
                           named_config, rmw_applications, run_simulation, sc_reference_execute,
                           selection_for, static_selection)
from fcssim.trace import AccessKind, DeviceClass, SyncKind

L, S, M = AccessKind.LOAD, AccessKind.STORE, AccessKind.RMW
CPU, GPU = DeviceClass.CPU, DeviceClass.GPU


def handoff_trace():
    """CPU writes one word in each of two blocks, then the GPU overwrites both from one pc, one per phase."""
    return mk([(0, S, 0, None, 10), (0, S, 16, None, 11), (0, M, FLAG, SyncKind.RELEASE, 12),
               (1, M, FLAG, SyncKind.ACQUIRE, 20), (1, S, 0, None, 21, 5), (1, M, FLAG, SyncKind.RELEASE, 22),
               (1, S, 16, None, 21, 6), (1, M, FLAG, SyncKind.RELEASE, 22)], {1: GPU})


def with_types(t, types):
    entries = {a.seq_id: (types.get(a.seq_id, R.ReqO_data if a.kind is M else R.ReqO), WordMask.of(a.word_mask))
               for a in t.accesses}
    return SelectionMap(entries, {}, False)


def gpu_store_txns(res, pc=21):
    return [x for x in res.metrics.transactions if x.core == 1 and x.pc == pc]


def test_sdd_store_to_remote_owned_word_is_three_hops():
    t = handoff_trace()
    res = run_simulation(t, static_selection(t, named_config("SDD")), named_config("SDD"))
    txns = gpu_store_txns(res)
    assert txns and all(x.legs == 3 for x in txns)
    assert res.metrics.llc_lookups_by_pc[21] == len(txns)


def test_predicted_store_skips_the_llc():
    t = handoff_trace()
    sel = with_types(t, {4: R.ReqWTo, 6: R.ReqWTo})
    res = run_simulation(t, sel, named_config("FCS+pred"))
    first, second = sorted(gpu_store_txns(res), key=lambda x: x.start)
    # nothing learned yet, so the first one goes through the LLC
    assert not first.predicted and first.legs == 3
    assert second.prediction_hit and second.legs == 2
    assert res.metrics.llc_lookups_by_pc[21] == 1
    assert res.image[0] == 5 and res.image[64] == 6


def test_bytes_are_header_plus_data_words():
    t = handoff_trace()
    res = run_simulation(t, static_selection(t, named_config("SDD")), named_config("SDD"))
    m = res.metrics
    assert m.bytes == m.recount_bytes() == sum(8 + 4 * e[-1] for e in m.message_log)
    assert m.messages == len(m.message_log)


def test_release_drains_pending_writes_first():
    t = mk([(1, S, 0, None, 1, 3), (1, S, 16, None, 2, 4), (1, M, FLAG, SyncKind.RELEASE, 3)], {1: GPU})
    sel = with_types(t, {0: R.ReqWT, 1: R.ReqWT, 2: R.ReqWT_data})
    res = run_simulation(t, sel, named_config("FCS"))
    reqs = [e for e in res.metrics.message_log if e[1] == "Request"]
    flag_at = next(i for i, e in enumerate(reqs) if e[5] == (FLAG // 16) * 64)
    data_at = [i for i, e in enumerate(reqs) if e[5] in (0, 64)]
    assert len(data_at) == 2 and max(data_at) < flag_at
    sends = {e[5]: e[0] for e in res.metrics.message_log if e[1] == "Request"}
    acks = [e[0] for e in res.metrics.message_log if e[1] == "Ack" and e[5] in (0, 64)]
    assert sends[(FLAG // 16) * 64] >= max(acks)


def test_static_selection_uses_flavor_types():
    t = handoff_trace()
    sel = static_selection(t, named_config("SMG"))
    assert sel.type_of(0) is R.ReqO_data and sel[0][1] == WordMask.full(16)   # MESI store: fetch the whole line
    assert sel.type_of(4) is R.ReqWT                                      # GPU store: write-through


def test_capability_violation_rejected():
    t = handoff_trace()
    sel = with_types(t, {4: R.ReqWTfwd})
    with pytest.raises(SimulationError, match="seq 4"):
        run_simulation(t, sel, named_config("SDD"))


def test_incomplete_selection_rejected():
    t = handoff_trace()
    sel = with_types(t, {})
    del sel.entries[3]
    with pytest.raises(SimulationError, match="no entry for seq 3"):
        run_simulation(t, sel, named_config("FCS"))


@pytest.mark.parametrize("cfg", list(NAMED_CONFIGS))
@pytest.mark.parametrize("bench", ["flex-v-s", "flex-o-wt", "flex-oa-wta", "prod-cons"])
def test_final_image_matches_sequential_reference(small_traces, cfg, bench):
    t = small_traces[bench]
    c = named_config(cfg)
    res = run_simulation(t, selection_for(t, c), c)
    assert res.image == sc_reference_execute(t)
    assert res.rmw_applied == rmw_applications(t)
    assert res.metrics.max_retries <= 2


def test_simulation_is_deterministic(small_traces):
    t = small_traces["flex-o-wt"]
    c = named_config("FCS+pred")
    sel = selection_for(t, c)
    a, b = run_simulation(t, sel, c).metrics, run_simulation(t, sel, c).metrics
    assert (a.cycles, a.bytes, a.messages, a.hops) == (b.cycles, b.bytes, b.messages, b.hops)
    assert a.message_log == b.message_log


def test_reference_execute_by_hand():
    t = mk([(0, S, 1, None, 0, 4), (1, M, 1, None, 1, 3), (0, L, 1), (1, S, 2, None, 2, 9)])
    assert sc_reference_execute(t) == {4: 7, 8: 9}


def test_normalized_columns_by_hand():
    rows = [Metrics("SDD", "b", cycles=400, bytes=1000), Metrics("FCS", "b", cycles=300, bytes=250),
            Metrics("FCS", "other", cycles=1, bytes=1)]
    out = emit_metrics(rows, "csv", baseline="SDD").splitlines()
    head = out[0].split(",")
    assert head[:len(CSV_COLUMNS)] == CSV_COLUMNS and head[-2:] == ["bytes_vs_baseline", "cycles_vs_baseline"]
    assert out[1].endswith(",1.000,1.000")
    assert out[2].endswith(",0.250,0.750")
    assert out[3].endswith(",,")   # no baseline row for that benchmark


def test_text_report_lists_each_row():
    text = emit_metrics([Metrics("SDD", "b", bytes=10)], "text")
    assert "[b / SDD]" in text and "bytes" in text
    with pytest.raises(ValueError):
        emit_metrics([], "xml")


@pytest.mark.parametrize("name", list(NAMED_CONFIGS))
def test_config_description_round_trips(name):
    cfg = named_config(name)
    assert SimConfig.parse(cfg.describe()) == cfg


def test_config_parse_rejects_unknown_key():
    with pytest.raises(ValueError, match="colour"):
        SimConfig.parse("name=x\ncolour=blue")


def test_unknown_config_lists_valid_names():
    with pytest.raises(ValueError) as e:
        named_config("MESI-only")
    assert all(n in str(e.value) for n in NAMED_CONFIGS)


def test_fcs_capabilities_follow_flags():
    assert not named_config("FCS").capabilities(CPU).wt_forwarding
    assert named_config("FCS+fwd").capabilities(GPU).wt_forwarding
    assert not named_config("FCS+fwd").capabilities(GPU).owner_prediction
    assert not named_config("SMG").capabilities(CPU).word_granularity
