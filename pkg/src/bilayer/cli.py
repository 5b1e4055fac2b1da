"""Command line interface.

Subcommands:

``run``
    Execute one scenario.  Writes ``metrics.csv`` (plus a column schema
    file), the event trace log, and a final-chain dump into ``--out``.

``sweep``
    Run a scenario across one or more parameter axes and seeds; writes
    combined metrics plus rendered figures alongside the CSV.

``verify``
    Re-validate a final-chain dump from scratch: header linkage, body
    structure, signatures, per-transaction verdicts, settlement roots,
    reward conservation, and the claimed fork-choice key.

``report``
    Re-render figures from an existing metrics CSV.

Exit codes: 0 success, 1 validation failure, 2 runtime/usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from typing import Any, Sequence

from .blocks import Chain, macroblock_from_bytes
from .chain import (
    evaluate_chain,
    validate_chain_links,
    validate_header,
    validate_macroblock_body,
)
from .harness import (
    RunResult,
    doublespend_columns,
    doublespend_summary,
    run_scenario,
    selfish_summary,
    sweep,
    SELFISH_COLUMNS,
    with_updates,
)
from .ledger import GenesisPool, IncentiveParams, LedgerState, recompute_root
from .metrics import METRICS_COLUMNS, read_rows, write_rows
from .netsim import SimulationError
from .report import render_report
from .scenario import (
    Scenario,
    ScenarioError,
    bundled_scenario_names,
    load_bundled_scenario,
    load_scenario,
)
from .store import ConsensusParams


def _load(ref: str) -> Scenario:
    if os.path.exists(ref):
        return load_scenario(ref)
    name = ref[:-4] if ref.endswith(".scn") else ref
    if name in bundled_scenario_names():
        return load_bundled_scenario(name)
    raise ScenarioError(
        [
            f"no such scenario file or bundled name: {ref!r} "
            f"(bundled: {', '.join(bundled_scenario_names())})"
        ]
    )


def _coerce_like(current: Any, text: str) -> Any:
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, Fraction):
        return Fraction(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, str):
        return text
    raise ValueError(f"cannot override field of type {type(current).__name__}")


def _lookup(scenario: Scenario, path: str) -> Any:
    obj: Any = scenario
    for part in path.split("."):
        if not hasattr(obj, part):
            raise ValueError(f"scenario has no field {path!r}")
        obj = getattr(obj, part)
    return obj


def _apply_sets(scenario: Scenario, assignments: Sequence[str]) -> Scenario:
    updates = {}
    for text in assignments:
        if "=" not in text:
            raise ValueError(f"--set expects path=value, got {text!r}")
        path, raw = text.split("=", 1)
        updates[path] = _coerce_like(_lookup(scenario, path), raw)
    return with_updates(scenario, updates)


def _parse_axis(scenario: Scenario, text: str) -> tuple[str, list[Any]]:
    if "=" not in text:
        raise ValueError(f"--axis expects path=v1,v2,..., got {text!r}")
    path, raw = text.split("=", 1)
    current = _lookup(scenario, path)
    values = [_coerce_like(current, part.strip()) for part in raw.split(",") if part.strip()]
    if not values:
        raise ValueError(f"--axis {text!r} lists no values")
    return path, values


# -- chain dump ------------------------------------------------------------------


def write_chain_dump(path: str, result: RunResult) -> None:
    scenario = result.scenario
    params = result.build.consensus
    tip = result.tip
    meta = {
        "format": "bilayer-chain",
        "version": 1,
        "scenario": scenario.name,
        "seed": scenario.run.seed,
        "params": {
            "capacity": params.capacity,
            "micro_tx_cap": params.micro_tx_cap,
            "tenure_ms": params.tenure_ms,
            "header_bits": params.header_bits,
            "micro_bits": params.micro_bits,
            "block_reward": params.incentives.block_reward,
            "leader_fee_share": str(params.incentives.leader_fee_share),
            "macro_tx_cap": params.macro_tx_cap or 0,
            "verify_pow": params.verify_pow,
        },
        "genesis": {
            "accounts": {
                acct.hex(): [balance, 0]
                for acct, balance in sorted(
                    (k, v) for k, v in _genesis_allocations(scenario).items()
                )
            },
            "pool_size": scenario.genesis.pool_size,
            "pool_balance": scenario.genesis.pool_balance,
        },
        "claim": {
            "blocks": tip.height,
            "diversity": tip.diversity,
            "tip_root": tip.root.hex(),
            "supply": tip.supply,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for rec in result.store.iter_chain(tip):
            line = {"height": rec.height, "bytes": rec.block.to_bytes().hex()}
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def _genesis_allocations(scenario: Scenario) -> dict[bytes, int]:
    from .node import account_for_node

    return {account_for_node(i): amount for i, amount in scenario.genesis.fund_nodes}


def verify_chain_dump(path: str) -> list[str]:
    """Re-validate a dump from first principles; returns problems (empty = pass)."""
    problems: list[str] = []
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("format") != "bilayer-chain":
        return ["not a chain dump (missing bilayer-chain meta line)"]
    meta, entries = lines[0], lines[1:]

    raw_params = meta["params"]
    incentives = IncentiveParams(
        raw_params["block_reward"], Fraction(raw_params["leader_fee_share"])
    )
    params = ConsensusParams(
        capacity=raw_params["capacity"],
        micro_tx_cap=raw_params["micro_tx_cap"],
        tenure_ms=raw_params["tenure_ms"],
        header_bits=raw_params["header_bits"],
        micro_bits=raw_params["micro_bits"],
        incentives=incentives,
        macro_tx_cap=raw_params["macro_tx_cap"] or None,
        verify_pow=raw_params["verify_pow"],
    )
    allocations = {
        bytes.fromhex(acct): balance
        for acct, (balance, _nonce) in meta["genesis"]["accounts"].items()
    }
    pool_size = meta["genesis"]["pool_size"]
    pool = GenesisPool(pool_size, meta["genesis"]["pool_balance"]) if pool_size else None
    genesis_state = LedgerState.genesis(allocations, pool)

    blocks = []
    for index, entry in enumerate(entries):
        if entry["height"] != index:
            problems.append(f"entry {index}: height {entry['height']} out of order")
        data = bytes.fromhex(entry["bytes"])
        block, consumed = macroblock_from_bytes(data)
        if consumed != len(data):
            problems.append(f"entry {index}: {len(data) - consumed} trailing bytes")
        blocks.append(block)
    if not blocks:
        return problems + ["dump contains no blocks"]
    if blocks[0].header.state_root != genesis_state.root:
        problems.append("genesis block does not commit the genesis ledger root")

    reason = validate_chain_links(blocks)
    if reason is not None:
        return problems + [f"chain linkage: {reason.value}"]

    chain = Chain(tuple(blocks))
    try:
        evaluation = evaluate_chain(chain, genesis_state, incentives)
    except Exception as exc:  # settlement re-check failures surface here
        return problems + [f"settlement replay failed: {exc}"]

    for i in range(1, len(blocks)):
        header = blocks[i].header
        reason = validate_header(
            header,
            parent_hash=blocks[i - 1].header.hash(),
            parent_height=i - 1,
            expected_root=evaluation.states[i - 1].root,
            local_time_ms=header.timestamp_ms,
            tenure_ms=params.tenure_ms,
            expected_bits=params.header_bits,
            verify_pow=params.verify_pow,
        )
        if reason is not None:
            problems.append(f"block {i}: header invalid ({reason.value})")
        reason = validate_macroblock_body(
            blocks[i],
            capacity=params.capacity,
            micro_tx_cap=params.micro_tx_cap,
            macro_tx_cap=params.macro_tx_cap,
            expected_micro_bits=params.micro_bits,
            verify_pow=params.verify_pow,
        )
        if reason is not None:
            problems.append(f"block {i}: body invalid ({reason.value})")

    final = evaluation.final_state
    if recompute_root(final) != final.root:
        problems.append("incremental ledger root disagrees with full recomputation")
    expected_supply = genesis_state.supply + incentives.block_reward * (len(blocks) - 1)
    if final.supply != expected_supply:
        problems.append(
            f"supply {final.supply} != genesis + rewards {expected_supply}"
        )

    claim = meta.get("claim", {})
    checks = (
        ("blocks", len(blocks) - 1),
        ("diversity", evaluation.diversity),
        ("tip_root", final.root.hex()),
        ("supply", final.supply),
    )
    for key, recomputed in checks:
        if key in claim and claim[key] != recomputed:
            problems.append(
                f"claimed {key} {claim[key]!r} != recomputed {recomputed!r}"
            )
    return problems


# -- subcommands ----------------------------------------------------------------


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = _apply_sets(_load(args.scenario), args.set or [])
    if args.seed is not None:
        scenario.run.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    trace_path = None if args.no_trace else os.path.join(args.out, "trace.jsonl")
    result = run_scenario(scenario, trace_path=trace_path)

    csv_path = os.path.join(args.out, "metrics.csv")
    write_rows(csv_path, [result.row], METRICS_COLUMNS)
    _write_schema(os.path.join(args.out, "metrics.columns.txt"), METRICS_COLUMNS)
    if not args.no_dump:
        write_chain_dump(os.path.join(args.out, "chain.jsonl"), result)

    row = result.row
    print(
        f"{scenario.name}: {row['blocks']} blocks, "
        f"{row['distinct_valid_tx']} settled tx "
        f"({row['distinct_tps']:.1f} tx/s distinct, {row['total_tps']:.1f} total), "
        f"{row['reorgs']} reorgs, trace {row['trace_hash'][:16]}"
    )
    if scenario.attack.kind == "selfish":
        extra = selfish_summary(result)
        write_rows(
            os.path.join(args.out, "attack.csv"), [extra], SELFISH_COLUMNS
        )
        print(
            f"  withholding leader: revenue share {extra['attacker_revenue_share']:.4f} "
            f"(α={scenario.attack.alpha}), kept {extra['kept']}/{extra['leads']} leads"
        )
    elif scenario.attack.kind == "doublespend":
        extra = doublespend_summary(result)
        write_rows(
            os.path.join(args.out, "attack.csv"), [extra], doublespend_columns()
        )
        print(
            f"  double-spend races: {extra['trials']} trials, "
            f"success@2 {extra['success_at_2']:.3f}"
        )
    print(f"wrote {csv_path}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    base = _apply_sets(_load(args.scenario), args.set or [])
    axes = [_parse_axis(base, text) for text in args.axis]

    points: list[tuple[tuple[str, Any], ...]] = [()]
    for path, values in axes:
        points = [combo + ((path, value),) for combo in points for value in values]

    scenarios = []
    for combo in points:
        label = ",".join(f"{path.rsplit('.', 1)[-1]}={value}" for path, value in combo)
        for offset in range(args.seeds):
            updates: dict[str, Any] = dict(combo)
            updates["run.seed"] = base.run.seed + offset
            point = with_updates(base, updates)
            point.name = f"{base.name}/{label}" if label else base.name
            scenarios.append(point)

    os.makedirs(args.out, exist_ok=True)

    def progress(result: RunResult) -> None:
        row = result.row
        print(
            f"  {row['scenario']} seed={row['seed']}: {row['blocks']} blocks, "
            f"{row['distinct_tps']:.1f} tx/s distinct, {row['wall_s']:.1f}s wall",
            flush=True,
        )

    rows = sweep(scenarios, on_result=progress)
    csv_path = os.path.join(args.out, "metrics.csv")
    write_rows(csv_path, rows, METRICS_COLUMNS)
    _write_schema(os.path.join(args.out, "metrics.columns.txt"), METRICS_COLUMNS)
    written = [csv_path]
    if not args.no_figures:
        written += render_report(rows, args.out, "sweep")
    print("wrote " + ", ".join(written))
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    problems = verify_chain_dump(args.trace)
    if problems:
        for problem in problems:
            print(f"FAIL: {problem}", file=sys.stderr)
        return 1
    print(f"{args.trace}: chain dump verifies (all invariants hold)")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    rows = read_rows(args.csv)
    written = render_report(rows, args.out, args.stem)
    print("wrote " + ", ".join(written))
    return 0


def _write_schema(path: str, columns: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(columns) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bilayer",
        description="Bilayer-consensus network simulator and measurement harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario")
    run_p.add_argument("--scenario", required=True, help="scenario file or bundled name")
    run_p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    run_p.add_argument("--out", default="out", help="output directory")
    run_p.add_argument(
        "--set", action="append", metavar="PATH=VALUE",
        help="override a scenario field, e.g. chain.capacity=16",
    )
    run_p.add_argument("--no-dump", action="store_true", help="skip the chain dump")
    run_p.add_argument("--no-trace", action="store_true", help="skip the trace log")
    run_p.set_defaults(fn=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="run a scenario across parameter axes")
    sweep_p.add_argument("--scenario", required=True)
    sweep_p.add_argument(
        "--axis", action="append", required=True, metavar="PATH=V1,V2,...",
        help="sweep axis, e.g. chain.capacity=8,12,16,20,24 (repeatable)",
    )
    sweep_p.add_argument("--seeds", type=int, default=3, help="seeds per point")
    sweep_p.add_argument("--out", default="out")
    sweep_p.add_argument("--set", action="append", metavar="PATH=VALUE")
    sweep_p.add_argument("--no-figures", action="store_true")
    sweep_p.set_defaults(fn=_cmd_sweep)

    verify_p = sub.add_parser("verify", help="re-validate a final-chain dump")
    verify_p.add_argument("--trace", required=True, help="chain dump path (chain.jsonl)")
    verify_p.set_defaults(fn=_cmd_verify)

    report_p = sub.add_parser("report", help="render figures from a metrics CSV")
    report_p.add_argument("--csv", required=True)
    report_p.add_argument("--out", default="out")
    report_p.add_argument("--stem", default="report", help="figure filename prefix")
    report_p.set_defaults(fn=_cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"scenario error:\n{exc}", file=sys.stderr)
        return 2
    except (SimulationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
