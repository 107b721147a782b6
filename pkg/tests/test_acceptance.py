"""Acceptance checks A1-A8.

Every check prints one ``A<n> PASS|FAIL  description (measured)`` line and
then asserts.  Run through pytest, or directly with
``python tests/test_acceptance.py``.
"""
import sys
import time
from collections import Counter
from dataclasses import replace
from functools import lru_cache

import pytest

from conftest import FLAG, mk
from fcssim import checker
from fcssim.coherence import MAX_FORWARD_RETRIES
from fcssim.selector import HardwareProfile, SelectionMap, WordMask, select_all
from fcssim.selector import RequestType as R
from fcssim.simnet import (NAMED_CONFIGS, named_config, rmw_applications, run_simulation, sc_reference_execute,
                           selection_for)
from fcssim.trace import AccessKind, DeviceClass, MicrobenchParams, SyncKind, generate, phase_index

DEFAULTS = MicrobenchParams()
SMALL = MicrobenchParams(n_cpu_cores=2, n_gpu_cores=2, partition_words=32, iterations=3)
L, S, M = AccessKind.LOAD, AccessKind.STORE, AccessKind.RMW


@pytest.fixture
def say(capsys):
    def emit(tag, ok, what, measured=""):
        line = f"{tag:<3} {'PASS' if ok else 'FAIL'}  {what}" + (f"  ({measured})" if measured else "")
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


# ------------------------------------------------------------------ A1

FWD_PRED = named_config("FCS+pred").profile()
NO_FWD = HardwareProfile(supports_wt_forwarding=False, supports_owner_prediction=True)
_select_seconds: dict = {}


@lru_cache(maxsize=None)
def golden_selection(bench, profile_name):
    t0 = time.perf_counter()
    t = generate(bench, DEFAULTS)
    sel = select_all(t, FWD_PRED if profile_name == "fwd+pred" else NO_FWD)
    _select_seconds[(bench, profile_name)] = time.perf_counter() - t0
    return t, sel


GOLDEN = [
    ("flex-v-s", "fwd+pred", "CPU loads of A", ["cpu.ld_a"], {R.ReqS}),
    ("flex-v-s", "fwd+pred", "CPU loads of B", ["cpu.ld_b"], {R.ReqVo}),
    ("flex-v-s", "fwd+pred", "GPU stores to A", ["gpu.st_a"], {R.ReqWTfwd}),
    ("flex-v-s", "fwd+pred", "GPU accesses to B", ["gpu.ld_b", "gpu.st_b"], {R.ReqO_data}),
    ("flex-o-wt", "fwd+pred", "dense accesses", ["cpu.ld_dense", "cpu.st_dense", "gpu.ld_dense", "gpu.st_dense"],
     {R.ReqO, R.ReqO_data}),
    ("flex-o-wt", "fwd+pred", "sparse stores", ["cpu.st_sparse", "gpu.st_sparse"], {R.ReqWTo}),
    ("flex-oa-wta", "fwd+pred", "local RMWs", ["rmw.dense"], {R.ReqO_data}),
    ("flex-oa-wta", "fwd+pred", "remote RMWs", ["rmw.sparse"], {R.ReqWTo_data}),
    ("prod-cons", "fwd+pred", "reads", ["cpu.ld", "gpu.ld"], {R.ReqO_data}),
    ("prod-cons", "fwd+pred", "writes", ["cpu.st", "gpu.st"], {R.ReqWTo}),
    ("prod-cons", "no-fwd", "reads", ["cpu.ld", "gpu.ld"], {R.ReqVo}),
    ("prod-cons", "no-fwd", "writes", ["cpu.st", "gpu.st"], {R.ReqO}),
]


@pytest.mark.parametrize("bench,profile,what,insts,allowed", GOLDEN,
                         ids=[f"{g[0]}-{g[1]}-{g[2].replace(' ', '_')}" for g in GOLDEN])
def test_a1_golden_assignment(say, bench, profile, what, insts, allowed):
    t, sel = golden_selection(bench, profile)
    got = Counter()
    for name in insts:
        pc = t.inst_id(name)
        got.update(sel.type_of(a.seq_id).token for a in t.accesses if a.static_inst_id == pc)
    ok = bool(got) and set(got) <= {rt.token for rt in allowed}
    want = "/".join(sorted(rt.token for rt in allowed))
    seen = ", ".join(f"{k} x{v}" for k, v in got.most_common())
    assert say("A1", ok, f"{bench} [{profile}] {what} -> {want}", seen)


def test_a1_runtime(say):
    for bench, profile, *_ in GOLDEN:
        golden_selection(bench, profile)
    total = sum(_select_seconds.values())
    assert say("A1", total < 10, "selection of all golden cases under 10 s", f"{total:.1f} s")


# ------------------------------------------------------------------ A2

A2_BASE = checker.CheckConfig(n_cores=2, n_addresses=2, words_per_line=1)


@pytest.fixture(scope="module")
def a2_runs():
    t0 = time.perf_counter()
    runs = {v: checker.explore(checker.variant_config(A2_BASE, v)) for v in ("baseline", "+fwd", "+pred")}
    mutations = checker.mutation_suite(A2_BASE)
    return runs, mutations, time.perf_counter() - t0


def test_a2_no_violations_or_deadlocks(say, a2_runs):
    runs, _, _ = a2_runs
    bad = {v: (len(r.violations), len(r.deadlocks)) for v, r in runs.items() if not r.ok or r.truncated}
    counts = ", ".join(f"{v} {r.protocol_states}" for v, r in runs.items())
    assert say("A2", not bad, "2 cores x 2 addresses x 1 word/line: no violations, no deadlocks",
               f"protocol states {counts}; failing {bad or 'none'}")


def test_a2_state_growth(say, a2_runs):
    runs, _, _ = a2_runs
    base = runs["baseline"].protocol_states
    fwd, pred = runs["+fwd"].protocol_states / base, runs["+pred"].protocol_states / base
    assert say("A2", pred <= 1.25, "state-count ratio (+fwd +pred) / baseline <= 1.25",
               f"+fwd {fwd:.2f}, +pred {pred:.2f}")


@pytest.mark.parametrize("fault", checker.FAULTS)
def test_a2_mutation_detected(say, a2_runs, fault):
    _, mutations, _ = a2_runs
    r = mutations[fault]
    found = r.violations + r.deadlocks
    detail = f"{found[0].kind} after {len(found[0].events)} events: {found[0].message}" if found else "not detected"
    assert say("A2", bool(found) and bool(found[0].events), f"seeded bug {fault} caught with a counterexample",
               detail)


def test_a2_runtime(say, a2_runs):
    _, _, secs = a2_runs
    assert say("A2", secs < 300, "full matrix plus mutations under 5 min", f"{secs:.0f} s")


# ------------------------------------------------------------------ A3

_a3_seconds: dict = {}


@pytest.mark.parametrize("bench", ["flex-v-s", "flex-o-wt", "prod-cons", "flex-oa-wta"])
def test_a3_oracle_equivalence(say, bench):
    t0 = time.perf_counter()
    mismatches = []
    for seed in range(20):
        t = generate(bench, replace(SMALL, seed=seed))
        ref, rmws = sc_reference_execute(t), rmw_applications(t)
        for name, cfg in NAMED_CONFIGS.items():
            res = run_simulation(t, selection_for(t, cfg), cfg)
            ok = res.rmw_applied == rmws if bench == "flex-oa-wta" else res.image == ref
            if not ok:
                mismatches.append((seed, name))
    _a3_seconds[bench] = time.perf_counter() - t0
    what = "no RMW lost or duplicated" if bench == "flex-oa-wta" else "final image equals the SC oracle"
    assert say("A3", not mismatches, f"{bench}: {what}, 20 seeds x 7 configs",
               f"{len(mismatches)} mismatches" + (f", first {mismatches[0]}" if mismatches else ""))


def test_a3_runtime(say):
    total = sum(_a3_seconds.values())
    assert len(_a3_seconds) == 4, "run the A3 cases first"
    assert say("A3", total < 120, "oracle sweep under 2 min", f"{total:.0f} s")


# -------------------------------------------------------------- A4-A6

@lru_cache(maxsize=None)
def default_run(bench, cfg_name):
    t = generate(bench, DEFAULTS)
    cfg = named_config(cfg_name)
    sel = selection_for(t, cfg)
    return t, sel, run_simulation(t, sel, cfg).metrics


def test_a4_forwarding_raises_prod_cons_traffic(say):
    sdd, fwd = default_run("prod-cons", "SDD")[2].bytes, default_run("prod-cons", "FCS+fwd")[2].bytes
    assert say("A4", fwd > sdd, "prod-cons bytes(FCS+fwd) > bytes(SDD)", f"{fwd} vs {sdd}, {fwd / sdd:.3f}x")


def test_a4_prediction_lowers_prod_cons_traffic(say):
    sdd, pred = default_run("prod-cons", "SDD")[2].bytes, default_run("prod-cons", "FCS+pred")[2].bytes
    assert say("A4", pred < sdd, "prod-cons bytes(FCS+pred) < bytes(SDD)", f"{pred} vs {sdd}, {pred / sdd:.3f}x")


def test_a5_flex_v_s_traffic(say):
    smg, fcs = default_run("flex-v-s", "SMG")[2].bytes, default_run("flex-v-s", "FCS")[2].bytes
    assert say("A5", fcs <= 0.8 * smg, "flex-v-s bytes(FCS) <= 0.8 x bytes(SMG)", f"{fcs / smg:.3f}x")


def _sparse_lookups(cfg_name):
    t, _, m = default_run("flex-o-wt", cfg_name)
    return sum(m.llc_lookups_by_pc[t.inst_id(n)] for n in ("cpu.st_sparse", "gpu.st_sparse"))


def test_a6_prediction_avoids_llc_lookups(say):
    fwd, pred = _sparse_lookups("FCS+fwd"), _sparse_lookups("FCS+pred")
    assert say("A6", pred < fwd, "flex-o-wt sparse-store LLC lookups: FCS+pred < FCS+fwd", f"{pred} vs {fwd}")


def test_a6_steady_state_hit_rate(say):
    t, sel, m = default_run("flex-o-wt", "FCS+pred")
    phase = phase_index(t)
    steady = [x for x in m.transactions
              if sel.type_of(x.seqs[0]) is R.ReqWTo and phase[x.seqs[0]] >= 2]
    hits = sum(x.prediction_hit for x in steady)
    rate = hits / len(steady) if steady else 0.0
    assert say("A6", rate >= 0.9, "ReqWTo prediction hits from iteration 3 on >= 90%",
               f"{hits}/{len(steady)} = {rate:.1%}")


# ------------------------------------------------------------------ A7

def churn_trace(rounds=12):
    """Ownership of two words moves to a new core every round; core 3 keeps
    predicting the previous owner for one load and one store."""
    rows, types = [], {}
    for r in range(rounds):
        o = r % 3
        rows += [(o, M, FLAG, SyncKind.ACQUIRE, 1), (o, S, 0, None, 10 + o, r), (o, S, 16, None, 20 + o, r + 100),
                 (o, M, FLAG, SyncKind.RELEASE, 2)]
        types[len(rows) + 1], types[len(rows) + 2] = R.ReqVo, R.ReqWTo
        rows += [(3, M, FLAG, SyncKind.ACQUIRE, 1), (3, L, 0, None, 50), (3, S, 16, None, 60, r + 1000),
                 (3, M, FLAG, SyncKind.RELEASE, 2)]
    t = mk(rows, {0: DeviceClass.CPU, 1: DeviceClass.CPU, 2: DeviceClass.GPU, 3: DeviceClass.GPU})
    sel = SelectionMap({a.seq_id: (types.get(a.seq_id, R.ReqO_data if a.kind is M else R.ReqO),
                                   WordMask.of(a.word_mask)) for a in t.accesses}, {}, False)
    return t, sel, types


@pytest.fixture(scope="module")
def churn():
    t, sel, types = churn_trace()
    return t, types, run_simulation(t, sel, named_config("FCS+pred"))


def test_a7_every_predicted_request_served(say, churn):
    t, types, res = churn
    served = {s for x in res.metrics.transactions for s in x.seqs} & set(types)
    assert say("A7", served == set(types), "every ReqVo/ReqWTo under ownership churn completes",
               f"{len(served)}/{len(types)}")


def test_a7_nacks_seen(say, churn):
    n = churn[2].metrics.nacks
    assert say("A7", n > 0, "stale predictions are Nacked", f"{n} nacks")


def test_a7_retry_cap(say, churn):
    worst = churn[2].metrics.max_retries
    assert say("A7", worst <= MAX_FORWARD_RETRIES, f"no request retries more than {MAX_FORWARD_RETRIES} times",
               f"max {worst}")


def test_a7_image_matches_oracle(say, churn):
    t, _, res = churn
    assert say("A7", res.image == sc_reference_execute(t), "final image under churn equals the SC oracle")


# ------------------------------------------------------------------ A8

LINE_ONLY = HardwareProfile(supports_wt_forwarding=False, supports_owner_prediction=False,
                            word_granularity_state={DeviceClass.CPU: False, DeviceClass.GPU: False})
LOWERED_TYPES = {R.ReqS, R.ReqV, R.ReqWT, R.ReqWT_data, R.ReqO_data}


@pytest.fixture(scope="module")
def lowered():
    out = {}
    for bench in ("flex-v-s", "flex-o-wt", "flex-oa-wta", "prod-cons"):
        t = generate(bench, DEFAULTS)
        out[bench] = (t, select_all(t, LINE_ONLY))
    return out


def test_a8_lowered_types(say, lowered):
    extra = {b: sorted(rt.token for rt in sel.types() - LOWERED_TYPES) for b, (_, sel) in lowered.items()}
    extra = {b: e for b, e in extra.items() if e}
    used = sorted({rt.token for _, sel in lowered.values() for rt in sel.types()})
    assert say("A8", not extra, "no-fwd, no-pred, line profile uses only ReqS/ReqV/ReqWT[+data]/ReqO+data",
               f"used {', '.join(used)}" + (f"; extra {extra}" if extra else ""))


def test_a8_full_block_masks(say, lowered):
    partial = 0
    for t, sel in lowered.values():
        full = WordMask.full(t.words_per_block)
        partial += sum(m != full for _, m in sel.entries.values())
    assert say("A8", partial == 0, "line-granularity devices get full-block masks", f"{partial} partial masks")


def test_a8_smg_accepts_lowered_map(say, lowered):
    problems = []
    for bench, (t, sel) in lowered.items():
        try:
            res = run_simulation(t, sel, named_config("SMG"))
        except Exception as exc:  # report, then fail below
            problems.append(f"{bench}: {exc}")
            continue
        if res.image != sc_reference_execute(t) or res.rmw_applied != rmw_applications(t):
            problems.append(f"{bench}: wrong final memory")
    assert say("A8", not problems, "SMG simulates the lowered maps without capability errors",
               "; ".join(problems) or "4 benchmarks, images match")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
