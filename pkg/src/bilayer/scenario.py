"""Scenario files: a flat, line-oriented run description.

The format is ``[section]`` headers over ``key = value`` pairs, with
``#`` comments.  Every syntax or range problem is collected with its line
number and reported in one error, so a scenario with three typos does not
take three runs to fix.  ``emit_scenario`` writes a scenario back out in
canonical order; parse → emit → parse is the identity on the parsed form.

A repeated ``[node]`` section describes per-node overrides (selection
strategy, mempool size, scheduled crash/recovery windows); all other
sections appear at most once.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, fields as dataclass_fields
from fractions import Fraction
from pathlib import Path


class ScenarioError(ValueError):
    """One or more problems in a scenario file, each with a line number."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


@dataclass
class NetworkSpec:
    nodes: int = 50
    topology: str = "random"  # complete | ring | line | random
    degree: float = 5.0
    latency: str = "uniform"  # fixed | uniform | region
    latency_ms: float = 50.0
    latency_min_ms: float = 20.0
    latency_max_ms: float = 200.0
    region_count: int = 4
    intra_ms: float = 20.0
    cross_min_ms: float = 80.0
    cross_max_ms: float = 250.0
    jitter_ms: float = 0.0


@dataclass
class PowSpec:
    header_interval_s: float = 60.0  # network-wide mean time between headers
    micro_interval_s: float = 200.0  # per-node mean time between microblocks
    header_bits: int = 22
    micro_bits: int = 16


@dataclass
class ChainSpec:
    capacity: int = 12
    micro_tx_cap: int = 3800
    macro_tx_cap: int = 0  # 0 means no extra cap on packaged transactions
    tenure_s: float = 120.0
    grace_s: float = 3.0
    block_reward: int = 50
    leader_fee_share: Fraction = Fraction(1, 2)


@dataclass
class MempoolSpec:
    size: int = 50_000
    selection: str = "random"  # random | fee | locality


@dataclass
class GenesisSpec:
    pool_size: int = 10_000_000
    pool_balance: int = 1_000
    # "index:amount" pairs funding specific node accounts at genesis.
    fund_nodes: tuple[tuple[int, int], ...] = ()


@dataclass
class InjectionSpec:
    rate_tps: float = 1000.0
    batch_ms: float = 1000.0
    recipients: int = 1000
    amount: int = 1
    fee_min: int = 1
    fee_max: int = 10
    payload_bytes: int = 0
    sample_every: int = 50  # latency-tracking stride; 0 disables tracking
    origins: tuple[int, ...] = ()  # empty = all nodes inject


@dataclass
class GossipSpec:
    tx_hop_limit: int = 2  # 0 means full flooding reach


@dataclass
class RunSpec:
    duration_s: float = 3600.0
    seed: int = 1
    expect_idle: bool = False


@dataclass
class AttackSpec:
    kind: str = "none"  # none | selfish | doublespend | detain
    node: int = 0
    alpha: float = 0.0
    victim_node: int = 1
    give_up_gap: int = 4
    max_tracked_depth: int = 8
    detain_ms: float = 0.0
    spend_amount: int = 5
    spend_fee: int = 1


@dataclass
class NodeOverride:
    id: int = -1
    selection: str = ""
    mempool_size: int = 0
    crash_at_s: float = -1.0
    recover_at_s: float = -1.0


@dataclass
class Scenario:
    name: str = "unnamed"
    network: NetworkSpec = field(default_factory=NetworkSpec)
    pow: PowSpec = field(default_factory=PowSpec)
    chain: ChainSpec = field(default_factory=ChainSpec)
    mempool: MempoolSpec = field(default_factory=MempoolSpec)
    genesis: GenesisSpec = field(default_factory=GenesisSpec)
    injection: InjectionSpec = field(default_factory=InjectionSpec)
    gossip: GossipSpec = field(default_factory=GossipSpec)
    run: RunSpec = field(default_factory=RunSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    nodes: tuple[NodeOverride, ...] = ()


_CHOICES = {
    ("network", "topology"): ("complete", "ring", "line", "random"),
    ("network", "latency"): ("fixed", "uniform", "region"),
    ("mempool", "selection"): ("random", "fee", "locality"),
    ("node", "selection"): ("", "random", "fee", "locality"),
    ("attack", "kind"): ("none", "selfish", "doublespend", "detain"),
}

_SECTIONS = {
    "meta": None,  # special-cased: only "name"
    "network": NetworkSpec,
    "pow": PowSpec,
    "chain": ChainSpec,
    "mempool": MempoolSpec,
    "genesis": GenesisSpec,
    "injection": InjectionSpec,
    "gossip": GossipSpec,
    "run": RunSpec,
    "attack": AttackSpec,
    "node": NodeOverride,
}


def _parse_value(kind: type, text: str, errors: list[str], where: str):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is Fraction:
            return Fraction(text)
        if kind is str:
            return text
    except (ValueError, ZeroDivisionError) as exc:
        errors.append(f"{where}: {exc}")
        return None
    errors.append(f"{where}: unsupported field type {kind!r}")
    return None


def _parse_pairs(text: str, errors: list[str], where: str) -> tuple[tuple[int, int], ...]:
    pairs = []
    if not text.strip():
        return ()
    for chunk in text.split(","):
        try:
            left, _, right = chunk.partition(":")
            pairs.append((int(left), int(right)))
        except ValueError:
            errors.append(f"{where}: expected 'index:amount', got {chunk.strip()!r}")
    return tuple(pairs)


def _parse_id_list(text: str, errors: list[str], where: str) -> tuple[int, ...]:
    if not text.strip() or text.strip() == "all":
        return ()
    out = []
    for chunk in text.split(","):
        try:
            out.append(int(chunk))
        except ValueError:
            errors.append(f"{where}: expected an integer id, got {chunk.strip()!r}")
    return tuple(out)


def parse_scenario(text: str, *, name_hint: str = "unnamed") -> Scenario:
    scenario = Scenario(name=name_hint)
    errors: list[str] = []
    section = ""
    current: object | None = None
    node_overrides: list[NodeOverride] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SECTIONS:
                errors.append(f"line {line_no}: unknown section [{section}]")
                current = None
                continue
            if section == "node":
                current = NodeOverride()
                node_overrides.append(current)
            elif section == "meta":
                current = scenario
            else:
                current = getattr(scenario, section)
            continue
        if "=" not in line:
            errors.append(f"line {line_no}: expected 'key = value', got {line!r}")
            continue
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        where = f"line {line_no}: [{section}] {key}"
        if current is None:
            errors.append(f"{where}: value outside a known section")
            continue
        if section == "meta":
            if key == "name":
                scenario.name = value
            else:
                errors.append(f"{where}: unknown key")
            continue
        spec_fields = {f.name: f for f in dataclass_fields(current)}
        if key not in spec_fields:
            errors.append(f"{where}: unknown key")
            continue
        if key == "fund_nodes":
            setattr(current, key, _parse_pairs(value, errors, where))
            continue
        if key == "origins":
            setattr(current, key, _parse_id_list(value, errors, where))
            continue
        kind = spec_fields[key].type
        if isinstance(kind, str):
            kind = {"int": int, "float": float, "str": str, "bool": bool,
                    "Fraction": Fraction}.get(kind.split("|")[0].strip(), str)
        parsed = _parse_value(kind, value, errors, where)
        if parsed is None and kind is not str:
            continue
        choices = _CHOICES.get((section, key))
        if choices is not None and parsed not in choices:
            errors.append(f"{where}: must be one of {', '.join(c or '(empty)' for c in choices)}")
            continue
        setattr(current, key, parsed)

    scenario.nodes = tuple(node_overrides)
    _check_ranges(scenario, errors)
    if errors:
        raise ScenarioError(errors)
    return scenario


def _check_ranges(s: Scenario, errors: list[str]) -> None:
    def bad(condition: bool, message: str) -> None:
        if condition:
            errors.append(message)

    bad(s.network.nodes < 2, "[network] nodes must be at least 2")
    bad(s.network.degree <= 0, "[network] degree must be positive")
    bad(
        s.network.latency_min_ms > s.network.latency_max_ms,
        "[network] latency_min_ms exceeds latency_max_ms",
    )
    bad(s.network.region_count < 1, "[network] region_count must be at least 1")
    bad(s.pow.header_interval_s <= 0, "[pow] header_interval_s must be positive")
    bad(s.pow.micro_interval_s <= 0, "[pow] micro_interval_s must be positive")
    bad(not 0 <= s.pow.header_bits <= 64, "[pow] header_bits must be within 0..64")
    bad(not 0 <= s.pow.micro_bits <= 64, "[pow] micro_bits must be within 0..64")
    bad(s.chain.capacity < 1, "[chain] capacity must be at least 1")
    bad(s.chain.micro_tx_cap < 1, "[chain] micro_tx_cap must be at least 1")
    bad(s.chain.tenure_s <= 0, "[chain] tenure_s must be positive")
    bad(s.chain.block_reward < 0, "[chain] block_reward must be non-negative")
    bad(
        not 0 <= s.chain.leader_fee_share <= 1,
        "[chain] leader_fee_share must be within [0, 1]",
    )
    bad(s.mempool.size < 1, "[mempool] size must be at least 1")
    bad(s.genesis.pool_size < 0, "[genesis] pool_size must be non-negative")
    bad(s.genesis.pool_balance < 0, "[genesis] pool_balance must be non-negative")
    bad(s.injection.rate_tps < 0, "[injection] rate_tps must be non-negative")
    bad(s.injection.batch_ms <= 0, "[injection] batch_ms must be positive")
    bad(s.injection.recipients < 1, "[injection] recipients must be at least 1")
    bad(s.injection.fee_min > s.injection.fee_max, "[injection] fee_min exceeds fee_max")
    bad(s.injection.payload_bytes > 64, "[injection] payload_bytes must be at most 64")
    bad(s.gossip.tx_hop_limit < 0, "[gossip] tx_hop_limit must be non-negative")
    bad(s.run.duration_s <= 0, "[run] duration_s must be positive")
    bad(s.attack.kind != "none" and not 0 <= s.attack.alpha < 1,
        "[attack] alpha must be within [0, 1)")
    bad(
        s.attack.kind != "none" and not 0 <= s.attack.node < s.network.nodes,
        "[attack] node is out of range",
    )
    bad(
        s.attack.kind == "doublespend"
        and not 0 <= s.attack.victim_node < s.network.nodes,
        "[attack] victim_node is out of range",
    )
    bad(
        s.attack.kind == "doublespend" and s.attack.victim_node == s.attack.node,
        "[attack] victim_node must differ from the attacking node",
    )
    for override in s.nodes:
        bad(
            not 0 <= override.id < s.network.nodes,
            f"[node] id {override.id} is out of range",
        )
        bad(
            override.crash_at_s >= 0
            and override.recover_at_s >= 0
            and override.recover_at_s <= override.crash_at_s,
            f"[node] id {override.id}: recover_at_s must come after crash_at_s",
        )
    for index, amount in s.genesis.fund_nodes:
        bad(
            not 0 <= index < s.network.nodes,
            f"[genesis] fund_nodes index {index} is out of range",
        )
        bad(amount < 0, f"[genesis] fund_nodes amount for {index} must be non-negative")
    for origin in s.injection.origins:
        bad(
            not 0 <= origin < s.network.nodes,
            f"[injection] origin {origin} is out of range",
        )


def emit_scenario(scenario: Scenario) -> str:
    """Canonical text form; parsing it reproduces the scenario exactly."""
    out: list[str] = [f"[meta]", f"name = {scenario.name}", ""]

    def emit_section(title: str, obj) -> None:
        out.append(f"[{title}]")
        for f in dataclass_fields(obj):
            value = getattr(obj, f.name)
            if f.name == "fund_nodes":
                value = ",".join(f"{i}:{a}" for i, a in value)
            elif f.name == "origins":
                value = ",".join(str(i) for i in value) if value else "all"
            elif isinstance(value, bool):
                value = "true" if value else "false"
            out.append(f"{f.name} = {value}")
        out.append("")

    emit_section("network", scenario.network)
    emit_section("pow", scenario.pow)
    emit_section("chain", scenario.chain)
    emit_section("mempool", scenario.mempool)
    emit_section("genesis", scenario.genesis)
    emit_section("injection", scenario.injection)
    emit_section("gossip", scenario.gossip)
    emit_section("run", scenario.run)
    emit_section("attack", scenario.attack)
    for override in scenario.nodes:
        emit_section("node", override)
    return "\n".join(out)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), name_hint=path.stem)


def bundled_scenario_names() -> list[str]:
    root = importlib.resources.files("bilayer") / "scenarios"
    return sorted(p.name.removesuffix(".scn") for p in root.iterdir() if p.name.endswith(".scn"))


def load_bundled_scenario(name: str) -> Scenario:
    root = importlib.resources.files("bilayer") / "scenarios"
    resource = root / f"{name}.scn"
    if not resource.is_file():
        known = ", ".join(bundled_scenario_names())
        raise ScenarioError([f"no bundled scenario named {name!r} (available: {known})"])
    return parse_scenario(resource.read_text(encoding="utf-8"), name_hint=name)
