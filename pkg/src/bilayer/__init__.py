"""Deterministic simulator and protocol library for a bilayer PoW ledger.

Two proof-of-work layers share one chain: light macroblock headers elect
a leader per round, and independently mined microblocks carry the
transactions the leader packages when its tenure ends.  The package
provides the protocol types and rules (``blocks``, ``chain``,
``ledger``, ``store``), a discrete-event network simulator with node
behaviours and adversaries (``netsim``, ``node``, ``adversary``), and a
measurement harness with scenario files, metrics, and figure rendering
(``scenario``, ``harness``, ``metrics``, ``report``, ``cli``).
"""

from .blocks import (
    Chain,
    HEADER_SIZE,
    MICRO_HEADER_SIZE,
    Macroblock,
    MacroblockHeader,
    Microblock,
    MicroblockHeader,
    TX_BASE_SIZE,
    Transaction,
    compute_body_root,
    tx_id,
    tx_merkle_root,
)
from .chain import (
    ForkChoiceKey,
    RejectReason,
    ValidityReport,
    Verdict,
    evaluate_chain,
    fork_choice,
    resolve_validity,
    validate_header,
    validate_macroblock_body,
    validate_microblock,
)
from .harness import Build, RunResult, build_simulation, run_scenario, sweep
from .ledger import (
    Account,
    GenesisPool,
    IncentiveParams,
    LedgerState,
    SettlementError,
    pool_account_id,
    recompute_root,
    settle,
)
from .merkle import merkle_root
from .metrics import METRICS_COLUMNS, MetricsCollector, chain_metrics
from .netsim import (
    DeadlockError,
    RngStreams,
    Simulation,
    SimulationError,
    Topology,
    TraceRecorder,
    build_edges,
)
from .node import HonestNode, Mempool, NodeConfig, account_for_node, package_microblocks
from .adversary import DetainingRelay, DoubleSpendLeader, SelfishLeader
from .pow import Difficulty, HashPower, check_pow, mine_real, sample_mining_time
from .scenario import (
    Scenario,
    ScenarioError,
    bundled_scenario_names,
    load_bundled_scenario,
    load_scenario,
    parse_scenario,
)
from .store import BlockRecord, BlockStore, ConsensusParams, make_genesis_block

__version__ = "0.1.0"
