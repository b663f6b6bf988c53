"""Reference fabric: deterministic core and live nodes."""

import asyncio
import json
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabricbench.model import Transaction
from fabricbench.reffabric.ledger import (BAD_AUTH, BAD_NONCE, INSUFFICIENT_FUNDS, Block, ChainGap, FabricState,
                                          ForkDetected, InvalidBlock, TxPool, genesis_block, verify_chain)
from fabricbench.reffabric.node import ValidatorNode
from fabricbench.reffabric.wallet import WalletClient

from conftest import run_async

SECRETS = {f"acct{c}": bytes([c]) * 32 for c in range(5, 9)}


def accounts(balance=100):
    return {name: {"balance": balance, "secret": s.hex()} for name, s in SECRETS.items()}


def tx(sender=5, receiver=6, nonce=1, amount=1, ts=0):
    return Transaction.create(SECRETS[f"acct{sender}"], f"acct{sender}", f"acct{receiver}", amount, nonce, ts)


def state(vid=1, n=4, cap=200, balance=100):
    return FabricState(vid, n, accounts(balance), cap)


def test_wallet_accepts_valid_transfer():
    s = state()
    assert s.admit(tx(), from_wallet=True) is None
    assert s.status(tx().tx_id) == ("PENDING",)
    b = s.propose(500)
    assert b.txs == (tx(),)
    assert s.status(tx().tx_id) == ("CONFIRMED", 1, 500, 500)


def test_tampered_tag_rejected():
    t = tx()
    bad = Transaction(t.tx_id, t.sender, t.receiver, t.amount, t.nonce, bytes(32), t.submit_ts)
    s = state()
    assert s.admit(bad, from_wallet=True) == BAD_AUTH
    assert s.status(t.tx_id) == ("REJECTED", BAD_AUTH)


def test_equal_nonce_second_rejected():
    s = state()
    assert s.admit(tx(nonce=3, receiver=6), from_wallet=True) is None
    assert s.admit(tx(nonce=3, receiver=7), from_wallet=True) == BAD_NONCE


def test_wallet_nonce_must_increase():
    s = state()
    assert s.admit(tx(nonce=5), from_wallet=True) is None
    assert s.admit(tx(nonce=4), from_wallet=True) == BAD_NONCE
    # the gossip path only requires an unused nonce
    assert s.admit(tx(nonce=2)) is None


def test_insufficient_funds_counts_pending_spend():
    s = state(balance=2)
    assert s.admit(tx(nonce=1), True) is None
    assert s.admit(tx(nonce=2), True) is None
    assert s.admit(tx(nonce=3), True) == INSUFFICIENT_FUNDS


def test_leader_rotation():
    s = state(n=4)
    assert s.leader(0) == 1 and s.leader(5) == 2
    assert [s.leader(r) for r in range(8)] == [1, 2, 3, 4, 1, 2, 3, 4]


def test_empty_pool_still_produces_block():
    s = state()
    b = s.propose(500)
    assert b.txs == () and b.height == 1


def test_fifo_drain_of_oldest():
    s = state(cap=3, balance=100)
    sent = [tx(nonce=n) for n in range(1, 7)]
    for t in sent:
        assert s.admit(t, True) is None
    b = s.propose(500)
    assert b.txs == tuple(sent[:3])
    assert s.pool.ids() == [t.tx_id for t in sent[3:]]


def test_pool_has_no_duplicates_and_no_committed():
    p = TxPool()
    assert p.add(tx()) and not p.add(tx())
    s = state()
    s.admit(tx(), True)
    s.propose(500)
    assert tx().tx_id not in s.pool
    assert s.admit(tx()) == BAD_NONCE


def test_follower_applies_and_detects_forks_and_gaps():
    leader, follower = state(1), state(2)
    leader.admit(tx(), True)
    b1 = leader.propose(500)
    assert follower.apply(b1, 505)
    assert not follower.apply(b1, 510)  # duplicate delivery
    assert follower.status(tx().tx_id) == ("CONFIRMED", 1, 500, 505)
    other = Block(1, genesis_block().hash, 600, 3, ())
    with pytest.raises(ForkDetected):
        follower.apply(other, 700)
    b2 = leader.propose(1000)
    b3 = leader.propose(1500)
    with pytest.raises(ChainGap):
        follower.apply(b3, 1500)
    follower.apply(b2, 1000)
    follower.apply(b3, 1500)
    assert [b.hash for b in follower.chain] == [b.hash for b in leader.chain]


def test_invalid_blocks():
    s = state(cap=1)
    g = genesis_block()
    with pytest.raises(InvalidBlock):
        s.validate(Block(1, g.hash, 10, 1, (tx(nonce=1), tx(nonce=2))))
    t = tx()
    forged = Transaction(t.tx_id, t.sender, t.receiver, 50, t.nonce, t.auth_tag, t.submit_ts)
    with pytest.raises(InvalidBlock):
        s.validate(Block(1, g.hash, 10, 1, (forged,)))
    with pytest.raises(InvalidBlock):
        s.validate(Block(1, g.hash, 10, 9, ()))
    with pytest.raises(InvalidBlock):
        s.validate(Block(1, g.hash, 0, 1, ()))
    poor = state(balance=0)
    with pytest.raises(InvalidBlock):
        poor.validate(Block(1, g.hash, 10, 1, (tx(),)))


def test_block_hash_links_and_codec():
    s = state()
    s.admit(tx(), True)
    b = s.propose(500)
    assert b.prev_hash == genesis_block().hash and len(b.hash) == 32
    assert Block.decode(b.encode()) == b
    assert Block.decode(b.encode()).hash == b.hash
    rec = b.to_record(501)
    rec["timestamp"] = 999
    with pytest.raises(InvalidBlock):
        Block.from_record(rec)


ops = st.lists(st.tuples(st.integers(5, 8), st.integers(5, 8), st.integers(1, 4), st.booleans()), max_size=60)


@settings(max_examples=60)
@given(ops, st.integers(1, 5))
def test_conservation_and_agreement(ops_list, cap):
    leader, follower = state(1, cap=cap, balance=5), state(2, cap=cap, balance=5)
    nonces = {}
    ts = 0
    total = leader.total_balance()
    for sender, receiver, amount, propose in ops_list:
        nonces[sender] = nonces.get(sender, 0) + 1
        leader.admit(tx(sender, receiver, nonces[sender], amount), True)
        if propose:
            ts += 500
            follower.apply(leader.propose(ts), ts + 1)
            assert leader.total_balance() == total == follower.total_balance()
            assert all(v >= 0 for v in leader.balances.values())
    assert [b.hash for b in follower.chain] == [b.hash for b in leader.chain]
    summary = verify_chain(leader.chain, accounts(5))
    assert summary["balances"] == leader.balances


def test_verify_chain_detects_tampering():
    s = state()
    s.admit(tx(), True)
    s.propose(500)
    s.propose(1000)
    chain = list(s.chain)
    chain[2] = Block(2, bytes(32), 1000, 2, ())
    with pytest.raises(InvalidBlock):
        verify_chain(chain, accounts())


# live nodes ------------------------------------------------------------------


def _spec(n=3, round_ms=200, cap=50, delays=None, ports=None):
    from fabricbench.orchestrator import free_port

    return {
        "n_validators": n, "round_duration": round_ms, "block_capacity": cap, "accounts": accounts(1000),
        "topology": {"n": n, "edges": [[a, b] for a in range(1, n + 1) for b in range(a + 1, n + 1)]},
        "validators": {str(v): {"host": "127.0.0.1", "bind": "127.0.0.1", "peer_port": free_port(),
                                "wallet_port": free_port()} for v in range(1, n + 1)},
        "delays": delays or {},
    }


async def _cluster(tmp_path, spec):
    epoch = int(time.time() * 1000)
    nodes = []
    for v in range(1, spec["n_validators"] + 1):
        d = tmp_path / str(v)
        d.mkdir(exist_ok=True)
        node = ValidatorNode(v, spec, d, epoch)
        await node.start()
        nodes.append(node)
    return epoch, nodes


def test_live_cluster_confirms_and_agrees(tmp_path):
    spec = _spec()

    async def go():
        epoch, nodes = await _cluster(tmp_path, spec)
        w = await WalletClient("127.0.0.1", spec["validators"]["2"]["wallet_port"]).connect()
        sent = [tx(5, 6, n, 1, int(time.time() * 1000) - epoch) for n in range(1, 21)]
        replies = [await w.submit(t) for t in sent]
        bad = await w.submit(tx(5, 6, 3))
        assert (await w.ping()) >= 0
        await asyncio.sleep(1.0)
        status = await w.status([t.tx_id for t in sent] + ["missing"])
        await w.close()
        await asyncio.gather(*(n.stop() for n in nodes))
        return replies, bad, status, nodes

    replies, bad, status, nodes = run_async(go())
    assert all(r.startswith("OK") and r.endswith(" 2") for r in replies)
    assert bad.startswith("REJECTED") and bad.endswith(BAD_NONCE)
    assert status["missing"] == ["UNKNOWN"]
    assert all(status[t][0] == "CONFIRMED" for t in status if t != "missing")
    heads = {n.state.head.hash for n in nodes}
    assert len(heads) == 1
    for n in nodes:
        lines = (tmp_path / str(n.id) / "ledger.jsonl").read_text().splitlines()
        assert len(lines) == n.state.head.height + 1
        assert json.loads((tmp_path / str(n.id) / "netcounters.json").read_text())["net_out_bytes"] > 0
        assert n.state.total_balance() == n.state.genesis_total


def test_link_delay_holds_back_messages(tmp_path):
    spec = _spec(n=2, round_ms=1000, delays={"1": {"2": 150}, "2": {"1": 150}})

    async def go():
        epoch, nodes = await _cluster(tmp_path, spec)
        # validator 2 leads odd rounds; submit to validator 1 just after an odd round starts
        R = 1000
        now = int(time.time() * 1000) - epoch
        r = now // R + 1
        if r % 2 == 0:
            r += 1
        await asyncio.sleep((epoch + r * R + 20) / 1000 - time.time())
        w = await WalletClient("127.0.0.1", spec["validators"]["1"]["wallet_port"]).connect()
        t = tx(5, 6, 1, 1, int(time.time() * 1000) - epoch)
        await w.submit(t)
        await asyncio.sleep(2.5)
        st_ = (await w.status([t.tx_id]))[t.tx_id]
        await w.close()
        await asyncio.gather(*(n.stop() for n in nodes))
        return t, st_

    t, st_ = run_async(go())
    assert st_[0] == "CONFIRMED"
    # leader 2 sees the tx after 150 ms, includes it at the next odd round
    # and its block reaches validator 1 after another 150 ms
    commit = int(st_[3])
    assert commit - t.submit_ts >= 150 + 150


def test_stop_is_idempotent(tmp_path):
    spec = _spec(n=1)

    async def go():
        _, (node,) = await _cluster(tmp_path, spec)
        await asyncio.gather(node.stop(0.05), node.stop(0.05))
        await node.stop(0.05)
        return node

    node = run_async(go())
    assert (tmp_path / "1" / "ledger.jsonl").exists()
