"""Command-line entry point: ``init``, ``run``, ``analyze`` and ``game``.

Every subcommand takes ``--config`` (a JSON scenario or game file),
``--seed``, ``--schedule`` (failure schedule text file) and ``--out``
(output directory). Exit status is 0 on success, 1 when an invariant or
verdict fails and 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .cluster import ScheduleFormatError, parse_schedule
from .storage import Transcript, TranscriptFormatError
from .workload import ConfigError

log = logging.getLogger("shortstack")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load_config(path: Optional[str]):
    from .sim.scenario import ScenarioConfig

    if path is None:
        return ScenarioConfig()
    return ScenarioConfig.from_json(Path(path).read_text())


def _load_schedule(path: Optional[str]):
    if path is None:
        return []
    return parse_schedule(Path(path).read_text())


def _out_dir(path: Optional[str]) -> Path:
    out = Path(path or "shortstack-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_init(args) -> int:
    from .sim.scenario import Cluster

    cfg = _load_config(args.config)
    cl = Cluster(cfg, args.seed)
    out = _out_dir(args.out)
    (out / "plan.json").write_text(cl.plan.to_json())
    cl.transcript.write(out / "init_transcript.csv")
    print(f"initialized {len(cl.store)} labels for {cfg.workload.n} keys -> {out}")
    return EXIT_OK


def audit_to_json(result) -> dict:
    a = result.audit
    return {
        "batches": [[bid, *info] for bid, info in a.batches.items()],
        "arrivals": [[t, s, list(seq), bid, g] for t, s, seq, bid, g in a.arrivals],
        "failures": [[f.n, f.t, f.gamma, f.r] for f in a.failures],
        "epochs": [[t, c.epoch, c.server] for t, c in a.epochs],
        "history": [[r.client, list(r.op_id), r.kind, r.key,
                     None if r.value is None else r.value.decode(), r.invoke, r.response,
                     None if r.result is None else r.result.decode(errors="replace"), r.error]
                    for r in a.history],
        "generations": sorted(result.cluster.gens),
        "transitions": [list(x) for x in a.protocol],
    }


def cmd_run(args) -> int:
    from .sim.checks import invariant_suite
    from .sim.games import label_count_vector, uniformity_pvalue
    from .sim.scenario import run_scenario

    cfg = _load_config(args.config)
    schedule = _load_schedule(args.schedule)
    result = run_scenario(cfg, args.seed, schedule)
    out = _out_dir(args.out)
    result.transcript.write(out / "transcript.csv")
    (out / "audit.json").write_text(json.dumps(audit_to_json(result)))
    metrics = dict(result.metrics)
    p = uniformity_pvalue(label_count_vector(result))
    metrics["uniformity_p"] = p
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, default=str))
    print(f"ops {metrics['ops_completed']}/{metrics['ops']}  batches {metrics['batches']}  "
          f"end tick {metrics['end_tick']}  transcript {len(result.transcript)} records")
    print(f"{'PASS' if p > 0.01 else 'FAIL'} label uniformity (p={p:.3g})")
    ok = True
    for res in invariant_suite(result):
        print(res.line())
        ok &= res.passed
    return EXIT_OK if ok else EXIT_FAIL


def analyze_files(transcript: Transcript, audit: Optional[dict]) -> List[tuple]:
    """Checks that only need the transcript file and the audit file."""
    from .sim.games import uniformity_pvalue

    rows = []
    counts = transcript.access_counts()
    inserted = [r.label for r in transcript if r.op == "insert"]
    universe = inserted or sorted(counts)
    vec = [counts.get(lbl, 0) for lbl in universe]
    p = uniformity_pvalue(vec)
    rows.append(("label_uniformity", p > 0.01, f"p={p:.3g} over {len(universe)} labels"))
    lengths = {r.value_len for r in transcript}
    rows.append(("equal_value_lengths", len(lengths) <= 1, f"lengths {sorted(lengths)}"))
    if audit is not None:
        got: Dict[object, set] = {}
        for _t, _s, seq, bid, _g in audit["arrivals"]:
            got.setdefault(bid, set()).add(tuple(seq))
        partial = [b[0] for b in audit["batches"] if 0 < len(got.get(b[0], ())) < b[3]]
        rows.append(("batch_atomicity", not partial, f"{len(partial)} partial batch(es)"))
        arrivals = audit["arrivals"]
        bad = []
        for g in audit["generations"][1:]:
            last_old = max((i for i, a in enumerate(arrivals) if a[4] < g), default=-1)
            first_new = min((i for i, a in enumerate(arrivals) if a[4] >= g), default=len(arrivals))
            if last_old > first_new:
                bad.append(g)
        rows.append(("cut_point", not bad, f"violations in generations {bad}" if bad else "ok"))
    return rows


def cmd_analyze(args) -> int:
    base = Path(args.out or ".")
    tpath = Path(args.transcript) if args.transcript else base / "transcript.csv"
    apath = Path(args.audit) if args.audit else base / "audit.json"
    transcript = Transcript.read(tpath)
    audit = json.loads(apath.read_text()) if apath.exists() else None
    ok = True
    for name, passed, detail in analyze_files(transcript, audit):
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_FAIL


def cmd_game(args) -> int:
    from .sim.games import ind_cdfa_verdict, skew_pair, strawman_verdict
    from .sim.scenario import ScenarioConfig

    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    known = {"scenario", "skew0", "skew1", "pairs", "strawman_proxies", "alpha"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"game: unknown field(s) {sorted(extra)}")
    cfg = ScenarioConfig.from_dict(doc.get("scenario", {}))
    c0, c1 = skew_pair(cfg, doc.get("skew0", 0.99), doc.get("skew1", 0.0))
    seeds = [args.seed + i for i in range(int(doc.get("pairs", 20)))]
    alpha = float(doc.get("alpha", 0.01))
    report = ind_cdfa_verdict(c0, c1, seeds, _load_schedule(args.schedule), alpha)
    print(f"system: {report.summary()}")
    lines = {"system": {"pvalues": report.pair_pvalues, "combined_p": report.combined_p, "verdict": report.verdict}}
    proxies = doc.get("strawman_proxies")
    if proxies:
        w = cfg.workload
        straw = strawman_verdict(w.n, doc.get("skew0", 0.99), doc.get("skew1", 0.0), w.q, int(proxies), seeds,
                                 cfg.batch_size, alpha)
        print(f"partitioned strawman: {straw.summary()}")
        lines["strawman"] = {"pvalues": straw.pair_pvalues, "combined_p": straw.combined_p, "verdict": straw.verdict}
    if args.out:
        (_out_dir(args.out) / "game.json").write_text(json.dumps(lines, indent=2))
    return EXIT_OK if report.indistinguishable else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shortstack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON scenario (or game) file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--schedule", help="failure schedule file")
        p.add_argument("--out", help="output directory")

    common(sub.add_parser("init", help="build the smoothing plan and populate the store"))
    common(sub.add_parser("run", help="simulate a scenario and check invariants"))
    p = sub.add_parser("analyze", help="analyze a transcript (and audit log)")
    common(p)
    p.add_argument("--transcript", help="transcript CSV (default: OUT/transcript.csv)")
    p.add_argument("--audit", help="audit JSON (default: OUT/audit.json)")
    common(sub.add_parser("game", help="indistinguishability game verdict"))
    return parser


COMMANDS = {"init": cmd_init, "run": cmd_run, "analyze": cmd_analyze, "game": cmd_game}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ScheduleFormatError, TranscriptFormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
