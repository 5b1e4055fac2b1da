"""Validation-rule tests: verdicts, header/body checks, fork choice."""

import random
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from bilayer.blocks import (
    Chain,
    DEFAULT_SIGNATURES,
    Macroblock,
    MacroblockHeader,
    Microblock,
    MicroblockHeader,
    Transaction,
    signing_message,
    tx_id,
    tx_merkle_root,
)
from bilayer.chain import (
    ForkChoiceKey,
    RejectReason,
    Verdict,
    count_non_overlapping,
    evaluate_chain,
    expected_settlement,
    fork_choice,
    resolve_validity,
    validate_chain_links,
    validate_header,
    validate_macroblock_body,
    validate_microblock,
)
from bilayer.ledger import GenesisPool, IncentiveParams, LedgerState
from bilayer.pow import Difficulty, mine_real

A = b"\x0a" * 32
B = b"\x0b" * 32
C = b"\x0c" * 32
LEADER = b"\x1d" * 32
MINER = b"\x1e" * 32

PARAMS = IncentiveParams(block_reward=50, leader_fee_share=Fraction(1, 2))


def make_tx(sender, recipient, amount, fee=0, nonce=0):
    return Transaction(sender, recipient, amount, fee, nonce)


def make_micro(txs, miner=MINER, round_hash=b"\x99" * 32, bits=0, nonce=0):
    header = MicroblockHeader(
        round_header_hash=round_hash,
        miner=miner,
        merkle_root=tx_merkle_root(txs),
        timestamp_ms=0,
        difficulty_bits=bits,
        nonce=nonce,
    )
    return Microblock(header, tuple(txs))


def make_block(micros_txs, *, leader=LEADER, parent_hash=b"\x00" * 32,
               height=1, state_root=b"\x00" * 32, miner_per_micro=None,
               timestamp_ms=0):
    header = MacroblockHeader(
        version=1,
        height=height,
        prev_hash=parent_hash,
        state_root=state_root,
        timestamp_ms=timestamp_ms,
        difficulty_bits=0,
        miner=leader,
        nonce=0,
    )
    micros = []
    for i, txs in enumerate(micros_txs):
        miner = miner_per_micro[i] if miner_per_micro else MINER
        micros.append(make_micro(txs, miner=miner, round_hash=header.hash()))
    block = Macroblock(header, tuple(micros), b"")
    signature = DEFAULT_SIGNATURES.sign(leader, signing_message(block))
    return Macroblock(header, tuple(micros), signature)


class TestResolveValidity:
    def test_simple_valid_transfer(self):
        state = LedgerState.genesis({A: 100})
        block = make_block([[make_tx(A, B, 30, fee=5)]])
        report = resolve_validity(block, state, set())
        assert report.verdicts == (Verdict.VALID,)
        assert report.valid_tx_ids == (tx_id(block.microblocks[0].transactions[0]),)
        assert report.non_overlapping_valid_count == 1

    def test_duplicate_within_block(self):
        state = LedgerState.genesis({A: 100})
        tx = make_tx(A, B, 10)
        block = make_block([[tx], [tx]])
        report = resolve_validity(block, state, set())
        assert report.verdicts == (Verdict.VALID, Verdict.DUPLICATE_OVERLAP)

    def test_duplicate_against_prefix(self):
        state = LedgerState.genesis({A: 100})
        tx = make_tx(A, B, 10)
        block = make_block([[tx]])
        report = resolve_validity(block, state, {tx_id(tx)})
        assert report.verdicts == (Verdict.DUPLICATE_OVERLAP,)

    def test_nonce_conflict(self):
        state = LedgerState.genesis({A: 100})
        block = make_block([[make_tx(A, B, 10, nonce=3)]])
        report = resolve_validity(block, state, set())
        assert report.verdicts == (Verdict.NONCE_CONFLICT,)

    def test_stale_nonce_after_earlier_spend(self):
        state = LedgerState.genesis({A: 100})
        block = make_block([[make_tx(A, B, 10, nonce=0), make_tx(A, C, 10, nonce=0)]])
        report = resolve_validity(block, state, set())
        assert report.verdicts == (Verdict.VALID, Verdict.NONCE_CONFLICT)

    def test_insufficient_balance(self):
        state = LedgerState.genesis({A: 10})
        block = make_block([[make_tx(A, B, 10, fee=1)]])
        report = resolve_validity(block, state, set())
        assert report.verdicts == (Verdict.INSUFFICIENT_BALANCE,)

    def test_amount_plus_fee_must_be_covered(self):
        state = LedgerState.genesis({A: 10})
        block = make_block([[make_tx(A, B, 9, fee=1)]])
        assert resolve_validity(block, state, set()).verdicts == (Verdict.VALID,)

    def test_earlier_credit_spendable_later_in_scan(self):
        state = LedgerState.genesis({A: 100})
        block = make_block(
            [[make_tx(A, B, 60)], [make_tx(B, C, 60)]]
        )
        report = resolve_validity(block, state, set())
        assert report.verdicts == (Verdict.VALID, Verdict.VALID)

    def test_failed_transaction_is_not_seen(self):
        # The same id may succeed on a later inclusion once state allows.
        state = LedgerState.genesis({A: 100, B: 0})
        retried = make_tx(B, C, 50)
        first = make_block([[retried]])
        report1 = resolve_validity(first, state, set())
        assert report1.verdicts == (Verdict.INSUFFICIENT_BALANCE,)
        second = make_block([[make_tx(A, B, 80)], [retried]])
        report2 = resolve_validity(second, state, set())
        assert report2.verdicts == (Verdict.VALID, Verdict.VALID)

    def test_pool_accounts_spendable(self):
        state = LedgerState.genesis(pool=GenesisPool(size=4, balance=25))
        sender = (0).to_bytes(32, "big")
        block = make_block([[make_tx(sender, B, 25)]])
        assert resolve_validity(block, state, set()).verdicts == (Verdict.VALID,)

    def test_scan_order_is_package_order(self):
        # B's money arrives in the second microblock; a spend in the
        # first microblock cannot see it.
        state = LedgerState.genesis({A: 100})
        block = make_block([[make_tx(B, C, 60)], [make_tx(A, B, 60)]])
        report = resolve_validity(block, state, set())
        assert report.verdicts == (
            Verdict.INSUFFICIENT_BALANCE,
            Verdict.VALID,
        )


class TestResolveValidityOracle:
    """Randomized cross-check against a dictionary-based reference."""

    @staticmethod
    def reference(block, balances, nonces, seen):
        verdicts = []
        balances = dict(balances)
        nonces = dict(nonces)
        seen = set(seen)
        for _, tx in block.iter_transactions():
            txid = tx_id(tx)
            if txid in seen:
                verdicts.append(Verdict.DUPLICATE_OVERLAP)
            elif tx.nonce != nonces.get(tx.sender, 0):
                verdicts.append(Verdict.NONCE_CONFLICT)
            elif balances.get(tx.sender, 0) < tx.amount + tx.fee:
                verdicts.append(Verdict.INSUFFICIENT_BALANCE)
            else:
                balances[tx.sender] = balances.get(tx.sender, 0) - tx.amount - tx.fee
                nonces[tx.sender] = nonces.get(tx.sender, 0) + 1
                balances[tx.recipient] = balances.get(tx.recipient, 0) + tx.amount
                seen.add(txid)
                verdicts.append(Verdict.VALID)
        return verdicts

    def test_matches_reference_on_random_blocks(self):
        rng = random.Random(2024)
        accounts = [bytes([i]) * 32 for i in range(1, 6)]
        for _ in range(100):
            balances = {acct: rng.randrange(0, 60) for acct in accounts}
            state = LedgerState.genesis(balances)
            micros = []
            for _ in range(rng.randrange(1, 4)):
                txs = [
                    make_tx(
                        rng.choice(accounts),
                        rng.choice(accounts),
                        rng.randrange(0, 40),
                        fee=rng.randrange(0, 3),
                        nonce=rng.randrange(0, 2),
                    )
                    for _ in range(rng.randrange(1, 5))
                ]
                micros.append(txs)
            block = make_block(micros)
            report = resolve_validity(block, state, set())
            expected = self.reference(block, balances, {}, set())
            assert list(report.verdicts) == expected


class TestValidateHeader:
    def _header(self, **overrides):
        fields = dict(
            version=1,
            height=1,
            prev_hash=b"\x00" * 32,
            state_root=b"\x00" * 32,
            timestamp_ms=1000,
            difficulty_bits=0,
            miner=LEADER,
            nonce=0,
        )
        fields.update(overrides)
        return MacroblockHeader(**fields)

    def _check(self, header, **overrides):
        args = dict(
            parent_hash=b"\x00" * 32,
            parent_height=0,
            expected_root=b"\x00" * 32,
            local_time_ms=1000.0,
            tenure_ms=120_000.0,
            verify_pow=False,
        )
        args.update(overrides)
        return validate_header(header, **args)

    def test_acceptable(self):
        assert self._check(self._header()) is None

    def test_bad_parent(self):
        assert self._check(self._header(prev_hash=b"\x01" * 32)) is RejectReason.BAD_PARENT

    def test_bad_height(self):
        assert self._check(self._header(height=2)) is RejectReason.BAD_HEIGHT

    def test_bad_settlement_root(self):
        assert (
            self._check(self._header(state_root=b"\x05" * 32))
            is RejectReason.BAD_SETTLEMENT
        )

    def test_timestamp_window_two_tenures(self):
        ok = self._header(timestamp_ms=240_999)
        too_new = self._header(timestamp_ms=242_000)
        assert self._check(ok, local_time_ms=1000.0) is None
        assert self._check(too_new, local_time_ms=1000.0) is RejectReason.BAD_TIMESTAMP
        too_old = self._header(timestamp_ms=0)
        assert self._check(too_old, local_time_ms=500_000.0) is RejectReason.BAD_TIMESTAMP

    def test_wrong_declared_bits(self):
        header = self._header(difficulty_bits=9)
        assert self._check(header, expected_bits=10) is RejectReason.BAD_POW

    def test_real_pow_checked_when_enabled(self):
        unmined = self._header(difficulty_bits=12)
        assert self._check(unmined, verify_pow=True) in (None, RejectReason.BAD_POW)
        template = unmined.to_bytes()
        nonce = mine_real(template, 120, Difficulty(12))
        mined = self._header(difficulty_bits=12, nonce=nonce)
        assert self._check(mined, verify_pow=True) is None


class TestValidateMicroblock:
    def test_acceptable(self):
        micro = make_micro([make_tx(A, B, 1)], round_hash=b"\x77" * 32)
        assert (
            validate_microblock(micro, b"\x77" * 32, micro_tx_cap=10, verify_pow=False)
            is None
        )

    def test_wrong_round(self):
        micro = make_micro([], round_hash=b"\x77" * 32)
        assert (
            validate_microblock(micro, b"\x78" * 32, micro_tx_cap=10, verify_pow=False)
            is RejectReason.BAD_ROUND
        )

    def test_oversize(self):
        micro = make_micro([make_tx(A, B, i) for i in range(3)], round_hash=b"\x77" * 32)
        assert (
            validate_microblock(micro, b"\x77" * 32, micro_tx_cap=2, verify_pow=False)
            is RejectReason.OVERSIZE
        )

    def test_bad_merkle(self):
        good = make_micro([make_tx(A, B, 1)], round_hash=b"\x77" * 32)
        tampered = Microblock(good.header, (make_tx(A, B, 2),))
        assert (
            validate_microblock(tampered, b"\x77" * 32, micro_tx_cap=10, verify_pow=False)
            is RejectReason.BAD_MERKLE
        )

    def test_declared_bits_checked(self):
        micro = make_micro([], round_hash=b"\x77" * 32, bits=5)
        assert (
            validate_microblock(
                micro, b"\x77" * 32, micro_tx_cap=10, expected_bits=6, verify_pow=False
            )
            is RejectReason.BAD_POW
        )


class TestValidateMacroblockBody:
    def _kwargs(self, **overrides):
        args = dict(capacity=4, micro_tx_cap=10, verify_pow=False)
        args.update(overrides)
        return args

    def test_acceptable(self):
        block = make_block([[make_tx(A, B, 1)], [make_tx(B, C, 2)]])
        assert validate_macroblock_body(block, **self._kwargs()) is None

    def test_bad_signature(self):
        good = make_block([[make_tx(A, B, 1)]])
        forged = Macroblock(good.header, good.microblocks, b"\x00" * 32)
        assert (
            validate_macroblock_body(forged, **self._kwargs())
            is RejectReason.BAD_SIGNATURE
        )

    def test_over_capacity(self):
        block = make_block([[make_tx(A, B, i)] for i in range(3)])
        assert (
            validate_macroblock_body(block, **self._kwargs(capacity=2))
            is RejectReason.OVER_CAPACITY
        )

    def test_total_tx_cap(self):
        block = make_block([[make_tx(A, B, i) for i in range(4)]])
        assert (
            validate_macroblock_body(block, **self._kwargs(macro_tx_cap=3))
            is RejectReason.OVERSIZE
        )

    def test_self_packaged(self):
        block = make_block([[make_tx(A, B, 1)]], miner_per_micro=[LEADER])
        assert (
            validate_macroblock_body(block, **self._kwargs())
            is RejectReason.SELF_PACKAGED
        )

    def test_duplicate_microblock(self):
        header = MacroblockHeader(
            version=1, height=1, prev_hash=b"\x00" * 32, state_root=b"\x00" * 32,
            timestamp_ms=0, difficulty_bits=0, miner=LEADER, nonce=0,
        )
        micro = make_micro([make_tx(A, B, 1)], round_hash=header.hash())
        block = Macroblock(header, (micro, micro), b"")
        signed = Macroblock(
            header, (micro, micro),
            DEFAULT_SIGNATURES.sign(LEADER, signing_message(block)),
        )
        assert (
            validate_macroblock_body(signed, **self._kwargs())
            is RejectReason.DUPLICATE_MICROBLOCK
        )

    def test_nested_micro_failure_surfaces(self):
        block = make_block([[make_tx(A, B, i) for i in range(5)]])
        assert (
            validate_macroblock_body(block, **self._kwargs(micro_tx_cap=4))
            is RejectReason.OVERSIZE
        )


def _chain_with_blocks(state, specs):
    """specs: list of lists of micro tx-lists; threads parents and roots."""
    genesis_header = MacroblockHeader(
        version=1, height=0, prev_hash=b"\x00" * 32, state_root=state.root,
        timestamp_ms=0, difficulty_bits=0, miner=b"\x00" * 32, nonce=0,
    )
    chain = Chain((Macroblock(genesis_header, (), b""),))
    for spec in specs:
        root = expected_settlement(chain, state, PARAMS)
        block = make_block(
            spec,
            parent_hash=chain.tip_hash,
            height=chain.height + 1,
            state_root=root,
        )
        chain = chain.extended_with(block)
    return chain


class TestEvaluateChain:
    def test_threads_state_and_seen(self):
        state = LedgerState.genesis({A: 100})
        tx = make_tx(A, B, 10, fee=2)
        chain = _chain_with_blocks(state, [[[tx]], [[tx]]])
        evaluation = evaluate_chain(chain, state, PARAMS)
        assert [r.verdicts for r in evaluation.reports] == [
            (Verdict.VALID,),
            (Verdict.DUPLICATE_OVERLAP,),
        ]
        assert evaluation.diversity == 1
        assert len(evaluation.states) == 3
        assert evaluation.states[0] is state
        assert evaluation.final_state.get(B).balance == 10

    def test_count_non_overlapping(self):
        state = LedgerState.genesis({A: 100})
        chain = _chain_with_blocks(
            state,
            [
                [[make_tx(A, B, 10, nonce=0)], [make_tx(A, B, 10, nonce=0)]],
                [[make_tx(A, C, 10, nonce=1), make_tx(A, C, 5, nonce=2)]],
            ],
        )
        per_block, total = count_non_overlapping(chain, state, PARAMS)
        assert per_block == (1, 2)
        assert total == 3

    def test_expected_settlement_matches_final_root(self):
        state = LedgerState.genesis({A: 100})
        chain = _chain_with_blocks(state, [[[make_tx(A, B, 10)]]])
        evaluation = evaluate_chain(chain, state, PARAMS)
        assert expected_settlement(chain, state, PARAMS) == evaluation.final_state.root


class TestForkChoice:
    def _chain(self, state, specs):
        return _chain_with_blocks(state, specs)

    def test_longer_chain_wins_over_diversity(self):
        state = LedgerState.genesis({A: 100})
        long = self._chain(state, [[], []])
        short_rich = self._chain(state, [[[make_tx(A, B, 1)]]])
        assert fork_choice([short_rich, long], state, PARAMS) is long
        assert fork_choice([long, short_rich], state, PARAMS) is long

    def test_diversity_breaks_equal_length(self):
        state = LedgerState.genesis({A: 100})
        rich = self._chain(state, [[[make_tx(A, B, 1), make_tx(A, C, 1, nonce=1)]]])
        poor = self._chain(state, [[[make_tx(A, B, 2)]]])
        assert fork_choice([poor, rich], state, PARAMS) is rich

    def test_tip_hash_breaks_full_tie(self):
        state = LedgerState.genesis({A: 100})
        one = self._chain(state, [[[make_tx(A, B, 1)]]])
        two = self._chain(state, [[[make_tx(A, B, 2)]]])
        assert one.tip_hash != two.tip_hash
        expected = one if one.tip_hash < two.tip_hash else two
        assert fork_choice([one, two], state, PARAMS) is expected
        assert fork_choice([two, one], state, PARAMS) is expected

    def test_requires_candidates(self):
        state = LedgerState.genesis({})
        with pytest.raises(ValueError):
            fork_choice([], state, PARAMS)

    def test_key_for_chain_matches_components(self):
        state = LedgerState.genesis({A: 100})
        chain = self._chain(state, [[[make_tx(A, B, 1)]], []])
        key = ForkChoiceKey.for_chain(chain, state, PARAMS)
        assert key == ForkChoiceKey.from_values(2, 1, chain.tip_hash)

    def test_transitive_total_order_over_random_triples(self):
        rng = random.Random(99)
        def random_key():
            return ForkChoiceKey.from_values(
                rng.randrange(0, 4),
                rng.randrange(0, 4),
                rng.randrange(0, 8).to_bytes(32, "big"),
            )
        for _ in range(1000):
            a, b, c = random_key(), random_key(), random_key()
            # Totality: exactly one of <, ==, > per pair.
            for x, y in ((a, b), (b, c), (a, c)):
                assert (x < y) + (x == y) + (y < x) == 1
            # Transitivity over every ordered arrangement.
            if a <= b and b <= c:
                assert a <= c
            if c <= b and b <= a:
                assert c <= a
            if a <= c and c <= b:
                assert a <= b

    @given(
        st.integers(min_value=0, max_value=50),
        st.integers(min_value=0, max_value=1000),
        st.binary(min_size=32, max_size=32),
        st.integers(min_value=0, max_value=50),
        st.integers(min_value=0, max_value=1000),
        st.binary(min_size=32, max_size=32),
    )
    def test_key_ordering_prefers_blocks_then_diversity(
        self, blocks_a, div_a, tip_a, blocks_b, div_b, tip_b
    ):
        ka = ForkChoiceKey.from_values(blocks_a, div_a, tip_a)
        kb = ForkChoiceKey.from_values(blocks_b, div_b, tip_b)
        if blocks_a != blocks_b:
            assert (ka < kb) == (blocks_a > blocks_b)
        elif div_a != div_b:
            assert (ka < kb) == (div_a > div_b)
        else:
            assert (ka < kb) == (tip_a < tip_b)


class TestChainLinks:
    def test_valid_links(self):
        state = LedgerState.genesis({A: 100})
        chain = _chain_with_blocks(state, [[], []])
        assert validate_chain_links(chain.blocks) is None

    def test_broken_parent(self):
        state = LedgerState.genesis({A: 100})
        chain = _chain_with_blocks(state, [[], []])
        reordered = (chain.blocks[0], chain.blocks[2], chain.blocks[1])
        assert validate_chain_links(reordered) is RejectReason.BAD_PARENT

    def test_bad_height(self):
        state = LedgerState.genesis({A: 100})
        chain = _chain_with_blocks(state, [[]])
        tampered_header = MacroblockHeader(
            version=1,
            height=5,
            prev_hash=chain.blocks[0].header.hash(),
            state_root=chain.blocks[1].header.state_root,
            timestamp_ms=0,
            difficulty_bits=0,
            miner=LEADER,
            nonce=0,
        )
        tampered = (chain.blocks[0], Macroblock(tampered_header, (), b""))
        assert validate_chain_links(tampered) is RejectReason.BAD_HEIGHT
