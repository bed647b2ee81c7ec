"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adversary import AttackSpec
from .errors import ChainCorrupted, EveError, IoFailure
from .ledger import Ledger, LedgerBlock, verify_chain
from .scenario import ScenarioConfig, generate_scenario, load_scenario, save_scenario

log = logging.getLogger("eve")


def _load(path: str, seed: int | None) -> ScenarioConfig:
    if path.startswith("template:") and not Path(path).exists():
        return generate_scenario(path.split(":", 1)[1], seed or 0)
    return load_scenario(path, seed)


def _apply_attack(sc: ScenarioConfig, text: str | None) -> None:
    if text is None:
        return
    spec = AttackSpec.parse(text)
    sc.attack = spec.to_dict() if spec is not None else {}


def cmd_run(args) -> int:
    from .orchestrator import Simulation, emit_metrics

    sc = _load(args.scenario, args.seed)
    _apply_attack(sc, args.attack)
    if args.windows is not None:
        sc.windows = args.windows
    out = Path(args.out)
    sim = Simulation(sc, deterministic=args.deterministic, workers=args.workers,
                     journal_dir=out / "ledger")
    reports = sim.run()
    summary = emit_metrics(reports, out, {"scenario": sc.name, "seed": sc.seed,
                                          "chains": sim.net.verify_all()})
    save_scenario(sc, out / "scenario.json")
    for w in summary["windows"]:
        priced = ", ".join(f"w{p['window']} {p['status']} in {p['iterations']}" for p in w["pricing"])
        checked = (f"verified w{w['verified_window']}: {w['verification']}"
                   + (f" attackers={w['attackers']}" if w["attackers"] else "")
                   if w["verified_window"] is not None else "no verification")
        print(f"window {w['index']}: priced [{priced or '-'}]; {checked}")
    print(f"operator balance {summary['money']['operator_balance']:.6f}; outputs in {out}")
    return 0


def cmd_price(args) -> int:
    from .orchestrator import Simulation, WindowReport, emit_metrics

    sc = _load(args.scenario, args.seed)
    sc.windows = 1
    sim = Simulation(sc, deterministic=args.deterministic)
    rep = WindowReport(index=0)
    res = sim.clear(0, sim.bidding(0))
    sim._record_pricing(rep, 0, res)
    sim.scheduler.close()
    out = {"status": res.status, "iterations": res.iterations, "lam": res.lam.tolist(),
           "balance_inf": float(np.max(np.abs(res.balance), initial=0.0)), "wall_s": res.wall}
    if args.out:
        emit_metrics([rep], args.out, {"scenario": sc.name})
    print(json.dumps(out, indent=1))
    return 0


def cmd_verify(args) -> int:
    from .orchestrator import Simulation, WindowReport, emit_metrics

    sc = _load(args.scenario, args.seed)
    _apply_attack(sc, args.attack)
    sc.windows = 2
    sim = Simulation(sc, deterministic=True)
    sim.clear(0, sim.bidding(0))
    sim.execute(0)
    res, outcome = sim.verify(0)
    out = {"outcome": outcome, "attackers": list(res.attackers) if res else [],
           "iterations": res.iterations if res else 0,
           "active": list(res.active) if res else []}
    if args.out and res is not None:
        rep = WindowReport(index=1, verified_window=0, verification=outcome,
                           attackers=out["attackers"], verification_iterations=out["iterations"])
        for ph_i, ph in enumerate(res.phases):
            for k, pi in enumerate(ph.pi, start=1):
                rep.pi_history.append([ph_i, k] + [float(pi[ph.nodes.index(n)]) if n in ph.nodes else 0.0
                                                   for n in sim.topo.regions])
        emit_metrics([rep], args.out, {"scenario": sc.name})
    print(json.dumps(out, indent=1))
    return 0


def _journals(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(path.glob("*.jsonl"))
    return [path]


def _read_blocks(path: Path) -> tuple[list[LedgerBlock], int | None]:
    """Blocks up to the first unreadable line, and that line's index."""
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise IoFailure(f"cannot read journal {path}: {exc}") from exc
    blocks = []
    for i, line in enumerate(lines):
        try:
            blocks.append(LedgerBlock.from_json(json.loads(line)))
        except (ValueError, KeyError, TypeError):
            return blocks, i
    return blocks, None


def cmd_ledger(args) -> int:
    paths = _journals(Path(args.journal))
    if not paths:
        raise IoFailure(f"no journals under {args.journal}")
    if args.action == "dump":
        for path in paths:
            led = Ledger.from_journal(path)
            for blk in led.blocks:
                tx = blk.tx
                if args.key and not str(tx.get("key", "")).startswith(args.key):
                    continue
                print(json.dumps({"channel": path.stem, "index": blk.index, "hash": blk.hash[:16],
                                  "op": tx.get("op"), "key": tx.get("key"),
                                  "submitter": tx.get("submitter")}, sort_keys=True))
        return 0
    bad = []
    for path in paths:
        blocks, unreadable = _read_blocks(path)
        first = verify_chain(blocks)
        if first is None and unreadable is not None:
            first = unreadable
        print(f"{path.name}: " + ("ok" if first is None else f"corrupted at block {first}")
              + f" ({len(blocks)} blocks)")
        if first is not None:
            bad.append((path.name, first))
    if bad:
        name, first = bad[0]
        raise ChainCorrupted(f"{name}: first corrupted block {first}", first)
    return 0


def cmd_scenario(args) -> int:
    sc = generate_scenario(args.template, args.seed)
    save_scenario(sc, args.out)
    print(f"wrote {args.template} (seed {args.seed}) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eve", description="Transactive energy market simulator "
                                 "with distributed pricing, verification and a ledger.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate solving windows")
    r.add_argument("--scenario", required=True)
    r.add_argument("--windows", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--deterministic", action="store_true")
    r.add_argument("--workers", type=int)
    r.add_argument("--attack", help="none | mode:attacker[:key=value,...]")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_run)

    p = sub.add_parser("price", help="clear one window and print the prices")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_price)

    v = sub.add_parser("verify", help="execute one window and verify it")
    v.add_argument("--scenario", required=True)
    v.add_argument("--seed", type=int)
    v.add_argument("--attack")
    v.add_argument("--out")
    v.set_defaults(fn=cmd_verify)

    lg = sub.add_parser("ledger", help="inspect ledger journals")
    lg.add_argument("action", choices=("dump", "verify"))
    lg.add_argument("journal", help="journal file or directory of journals")
    lg.add_argument("--key", help="only dump keys with this prefix")
    lg.set_defaults(fn=cmd_ledger)

    s = sub.add_parser("scenario", help="write a built-in scenario to a file")
    s.add_argument("--template", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_scenario)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except EveError as exc:
        print(f"eve: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
