"""Command-line driver: generate, select, simulate, check, report and pipeline.

Every flag may also come from an INI-style file passed with ``--config-file``.
Keys live in a ``[run]`` section (or ``[check]`` for checker settings) and use
the flag name without the leading dashes.  Precedence, highest first:
command-line flag, config file, built-in default.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from . import checker
from .selector import SelectionMap, read_selection, write_selection
from .simnet import (NAMED_CONFIGS, Metrics, SimConfig, SimulationError, emit_metrics, named_config,
                     run_simulation, selection_for)
from .trace import GENERATORS, AccessKind, MicrobenchParams, generate, read_trace, write_trace

THREADS_ENV = "FCSSIM_THREADS"


@dataclass(frozen=True)
class RunJob:
    bench: str
    params: MicrobenchParams
    config: SimConfig
    out: Path
    dump_selection: bool = False
    dump_msglog: bool = False


# ------------------------------------------------------------------ helpers

def resolve_config(name: str) -> SimConfig:
    """A named configuration, or a file holding ``--print-config`` output."""
    if name in NAMED_CONFIGS:
        return named_config(name)
    p = Path(name)
    if p.is_file():
        return SimConfig.parse(p.read_text())
    return named_config(name)  # raises with the list of valid names


def _split(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return list(value)
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _params(ns: argparse.Namespace) -> MicrobenchParams:
    return MicrobenchParams(n_cpu_cores=ns.cores_cpu, n_gpu_cores=ns.cores_gpu,
                            partition_words=ns.partition_words, iterations=ns.iterations, seed=ns.seed)


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer")
        return n
    return os.cpu_count() or 1


def _stem(bench: str, cfg: str) -> str:
    return f"{bench}.{cfg}".replace("+", "_")


def write_msglog(m: Metrics, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cycle", "class", "type", "src", "dst", "block", "mask", "data_words"])
        w.writerows(m.message_log)


def run_one(job: RunJob) -> Metrics:
    """generate -> select (profile from the config) -> lower -> simulate; writes
    the optional per-run artifacts and returns the metrics."""
    t = generate(job.bench, job.params)
    sel = selection_for(t, job.config)
    stem = _stem(job.bench, job.config.name)
    if job.dump_selection:
        write_selection(sel, job.out / f"{stem}.sel")
    res = run_simulation(t, sel, job.config)
    m = res.metrics
    m.benchmark = job.bench
    if job.dump_msglog:
        write_msglog(m, job.out / f"{stem}.msglog.csv")
    m.message_log = []
    m.transactions = []
    return m


def run_many(jobs: Sequence[RunJob], workers: Optional[int] = None) -> list[Metrics]:
    workers = min(workers or worker_count(), len(jobs)) or 1
    if workers == 1:
        return [run_one(s) for s in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, jobs))


def read_metrics_csv(path) -> list[Metrics]:
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            m = Metrics(config=r["config"], benchmark=r["benchmark"])
            for k in ("cycles", "bytes", "messages", "hops", "llc_lookups", "pred_hits", "pred_misses", "nacks"):
                setattr(m, k, int(r.get(k) or 0))
            for k, v in r.items():
                if k.startswith("req:") and v:
                    m.requests_by_type[k[4:]] = int(v)
            rows.append(m)
    return rows


# ----------------------------------------------------------------- commands

def _load_trace(ns):
    if getattr(ns, "trace", None):
        return read_trace(ns.trace), Path(ns.trace).stem
    return generate(ns.bench, _params(ns)), ns.bench


def cmd_generate(ns) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for bench in _split(ns.bench):
        t = generate(bench, _params(ns))
        path = out / f"{bench}.trace"
        write_trace(t, path)
        print(f"{path}: {len(t.accesses)} accesses")
    return 0


def cmd_select(ns) -> int:
    t, stem = _load_trace(ns)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in _split(ns.configs):
        cfg = resolve_config(name)
        sel = selection_for(t, cfg)
        path = out / f"{_stem(stem, cfg.name)}.sel"
        write_selection(sel, path)
        counts: dict = {}
        for rt, _mask in sel.entries.values():
            counts[rt.token] = counts.get(rt.token, 0) + 1
        print(f"{path}: " + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return 0


def cmd_simulate(ns) -> int:
    t, stem = _load_trace(ns)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    names = _split(ns.configs)
    if ns.selection and len(names) != 1:
        raise ValueError("--selection needs exactly one configuration")
    rows = []
    for name in names:
        cfg = resolve_config(name)
        sel: SelectionMap = read_selection(ns.selection) if ns.selection else selection_for(t, cfg)
        if ns.dump_selection:
            write_selection(sel, out / f"{_stem(stem, cfg.name)}.sel")
        m = run_simulation(t, sel, cfg).metrics
        m.benchmark = stem
        if ns.dump_msglog:
            write_msglog(m, out / f"{_stem(stem, cfg.name)}.msglog.csv")
        rows.append(m)
    _emit(rows, ns, out)
    return 0


def _emit(rows: list[Metrics], ns, out: Path) -> None:
    baseline = ns.baseline if ns.baseline and any(m.config == ns.baseline for m in rows) else None
    (out / "metrics.csv").write_text(emit_metrics(rows, "csv", baseline))
    sys.stdout.write(emit_metrics(rows, ns.format, baseline))


def cmd_pipeline(ns) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _params(ns)
    configs = [resolve_config(n) for n in _split(ns.configs)]
    benches = _split(ns.bench)
    for b in benches:
        write_trace(generate(b, params), out / f"{b}.trace")
    jobs = [RunJob(b, params, c, out, ns.dump_selection, ns.dump_msglog) for b in benches for c in configs]
    rows = run_many(jobs)
    _emit(rows, ns, out)
    return 0


def cmd_report(ns) -> int:
    rows = []
    for p in ns.metrics:
        rows.extend(read_metrics_csv(p))
    baseline = ns.baseline if ns.baseline and any(m.config == ns.baseline for m in rows) else None
    sys.stdout.write(emit_metrics(rows, ns.format, baseline))
    return 0


def cmd_check(ns) -> int:
    kinds = tuple(AccessKind(k) for k in _split(ns.kinds))
    ops = None if str(ns.ops_per_word).lower() in ("none", "unbounded") else int(ns.ops_per_word)
    base = checker.CheckConfig(n_cores=ns.cores, n_addresses=ns.addresses, words_per_line=ns.words_per_line,
                               kinds=kinds, ops_per_word=ops, max_in_flight=ns.max_in_flight,
                               faults=frozenset(_split(ns.faults)), state_budget=ns.state_budget)
    results = []
    t0 = time.time()
    for v in _split(ns.variants):
        results.append(checker.explore(checker.variant_config(base, v, ns.mode)))
    text = checker.format_results(results, ns.format)
    if ns.minimize:
        for r in results:
            for v in (r.violations + r.deadlocks)[:1]:
                short = checker.minimize_counterexample(r.config, v.events)
                text += f"minimized counterexample for {r.config.name} ({len(short)} events):\n"
                text += checker.format_events(short) + "\n"
    sys.stdout.write(text)
    if ns.format == "text" and len(results) > 1:
        ref = results[0].protocol_states
        for r in results:
            print(f"{r.config.name}: protocol-state ratio {r.protocol_states / ref:.3f}")
    print(f"elapsed {time.time() - t0:.1f}s", file=sys.stderr)
    return 0 if all(r.ok for r in results) else 1


# ------------------------------------------------------------------ parsing

def _common(p: argparse.ArgumentParser, run: bool = True) -> None:
    p.add_argument("--config-file", help="INI file whose [run]/[check] keys mirror the flags")
    p.add_argument("--format", choices=("csv", "text"), default="text")
    if not run:
        return
    p.add_argument("--bench", default="prod-cons", help=f"comma list of {', '.join(GENERATORS)}")
    p.add_argument("--configs", default="FCS+pred", help=f"comma list of {', '.join(NAMED_CONFIGS)} or config files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--cores-cpu", type=int, default=2)
    p.add_argument("--cores-gpu", type=int, default=8)
    p.add_argument("--partition-words", type=int, default=256)
    p.add_argument("--out", default="fcssim-out")
    p.add_argument("--dump-selection", action="store_true")
    p.add_argument("--dump-msglog", action="store_true")
    p.add_argument("--baseline", default=None, help="configuration the ratio columns divide by")
    p.add_argument("--print-config", action="store_true",
                   help="print the expanded configurations and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fcssim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write microbenchmark traces")
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("select", help="choose request types for a trace")
    _common(p)
    p.add_argument("--trace", help="trace file; generated from --bench when absent")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="simulate a trace under one or more configurations")
    _common(p)
    p.add_argument("--trace")
    p.add_argument("--selection", help="selection map to use instead of selecting")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pipeline", help="generate, select, simulate and report in one go")
    _common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="re-emit metrics CSV files, optionally normalized")
    _common(p, run=False)
    p.add_argument("metrics", nargs="+")
    p.add_argument("--baseline", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("check", help="exhaustively explore the protocol on a tiny system")
    _common(p, run=False)
    p.add_argument("--variants", default="baseline,+fwd,+pred")
    p.add_argument("--mode", choices=tuple(checker.VARIANT_SETS), default="extend")
    p.add_argument("--cores", type=int, default=2)
    p.add_argument("--addresses", type=int, default=2)
    p.add_argument("--words-per-line", type=int, default=1)
    p.add_argument("--kinds", default="Load,Store,RMW")
    p.add_argument("--ops-per-word", default="2", help="issue budget per core and address, or 'none'")
    p.add_argument("--max-in-flight", type=int, default=8)
    p.add_argument("--state-budget", type=int, default=10 ** 7)
    p.add_argument("--faults", default="", help=f"comma list of {', '.join(checker.FAULTS)}")
    p.add_argument("--minimize", action="store_true", help="shrink the first counterexample")
    p.set_defaults(func=cmd_check)
    return ap


def _file_defaults(path: str, section: str, parser: argparse.ArgumentParser) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    known = {a.dest: a for a in parser._actions}
    out = {}
    for sec in (section,) if cp.has_section(section) else ():
        for key, raw in cp.items(sec):
            dest = key.replace("-", "_")
            if dest not in known:
                raise ValueError(f"{path}: unknown key {key!r} in [{sec}]")
            act = known[dest]
            if isinstance(act, argparse._StoreTrueAction):
                out[dest] = cp.getboolean(sec, key)
            elif act.type is int:
                out[dest] = int(raw)
            else:
                out[dest] = raw
    return out


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    ap = build_parser()
    ns = ap.parse_args(argv)
    if ns.config_file:
        sub = ap._subparsers._group_actions[0].choices[ns.command]
        section = "check" if ns.command == "check" else "run"
        sub.set_defaults(**_file_defaults(ns.config_file, section, sub))
        ns = ap.parse_args(argv)
    return ns


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        ns = parse_args(argv)
        if getattr(ns, "print_config", False):
            for name in _split(ns.configs):
                print(resolve_config(name).describe())
                print()
            return 0
        return ns.func(ns)
    except (ValueError, FileNotFoundError, SimulationError, checker.CheckBudgetExceeded) as exc:
        print(f"fcssim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
