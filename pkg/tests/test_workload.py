import pytest

from ledgerflow.core.access import find_asset, trace_lineage
from ledgerflow.core.ledger import validate_chain
from ledgerflow.core.provenance import PARENT_KEY
from ledgerflow.core.workload import parse_script, run_network
from ledgerflow.utils.errors import ScriptError

from conftest import DEMO_SCRIPT

DATASET = 'dataset B 0,1 1,3 2,5 3,7\n'
PROPOSE = 'propose peer0 peer1 fit{n} workflow_execution workflow=linreg:B>A{n}\n'


def test_parse_script_skips_comments_and_blanks():
    commands = parse_script('# header\n\njoin extra CLIENT  # trailing\nseal\n')
    assert [(c.line_number, c.verb, c.args) for c in commands] == [
        (3, 'join', ('extra', 'CLIENT')), (4, 'seal', ())]


def test_parse_script_options():
    (command,) = parse_script('propose peer0 peer1 fit workflow_execution '
                              'workflow=scale:B>S@factor=2,linreg:S>A prov=embedded repr=tree\n')
    assert command.args == ('peer0', 'peer1', 'fit', 'workflow_execution')
    assert command.options == {'workflow': 'scale:B>S@factor=2,linreg:S>A',
                               'prov': 'embedded', 'repr': 'tree'}


@pytest.mark.parametrize('text, line', [
    ('seal\nfly peer0\n', 2),
    ('join peer9\n', 1),
    ('join peer9 ADMIN\n', 1),
    ('seal\n\nseal now\n', 3),
    ('propose a b c d novalue\n', 1),
    ('propose a b c d k=1 k=2\n', 1),
    ('propose a b c d prov=sometimes\n', 1),
    ('propose a b c d repr=graph\n', 1),
    ('propose a b c d workflow=linreg:B\n', 1),
    ('propose a b c d workflow=linreg:B>A,scale:B>S@factor=2 repr=tree\n', 1),
    ('dataset B 1;2\n', 1),
    ('dataset B\n', 1),
    ('channel lab peer0\n', 1),
])
def test_parse_script_errors_carry_line(text, line):
    with pytest.raises(ScriptError) as excinfo:
        parse_script(text)
    assert excinfo.value.line_number == line


def test_demo_workload_agrees():
    outcome = run_network(5, DEMO_SCRIPT, seed=42)
    assert outcome.stalled == []
    assert all(result.accepted for result in outcome.results)
    assert len(outcome.results) == 5

    ledgers = {name: chain.to_bytes() for name, chain in outcome.chains.items()}
    assert len(set(ledgers.values())) == 1
    registry = outcome.network.peer('peer0').registry
    assert validate_chain(outcome.chains['peer3'], registry).valid


def test_demo_workload_is_deterministic():
    first = run_network(5, DEMO_SCRIPT, seed=42)
    second = run_network(5, DEMO_SCRIPT, seed=42)
    assert first.trace_bytes() == second.trace_bytes()
    assert first.chains['peer0'].to_bytes() == second.chains['peer0'].to_bytes()


def test_other_seed_still_valid():
    outcome = run_network(5, DEMO_SCRIPT, seed=1234)
    registry = outcome.network.peer('peer0').registry
    for chain in outcome.chains.values():
        assert validate_chain(chain, registry).valid
    assert len(list(outcome.chains['peer0'].transactions())) == 5


def test_derivation_links_to_parent():
    outcome = run_network(5, DEMO_SCRIPT)
    chain = outcome.chains['peer0']
    (parent,) = find_asset(chain, 'fitA')
    (child,) = find_asset(chain, 'fitA2')
    assert child.state[PARENT_KEY] == parent.tx_hex
    assert trace_lineage(chain, child.tx_id).tx_ids == (parent.tx_hex,)
    assert child.state['linreg.A.intercept'] == '2'


def test_private_state_only_on_members():
    outcome = run_network(5, DEMO_SCRIPT)
    (secret,) = find_asset(outcome.chains['peer0'], 'secret')
    assert secret.state == {}
    for name in ('peer0', 'peer1', 'peer2'):
        assert outcome.network.peer(name).side_state(secret.tx_hex)['note'] == \
            'confidential-result'
    for name in ('peer3', 'peer4'):
        assert outcome.network.peer(name).side_state(secret.tx_hex) is None
    assert b'confidential-result' not in outcome.chains['peer4'].to_bytes()


def test_batch_size_triggers_sealing():
    script = DATASET + ''.join(PROPOSE.format(n=n) for n in range(5))
    outcome = run_network(3, script, batch_size=2)
    chain = outcome.chains['peer0']
    assert [len(block.transactions) for block in chain] == [2, 2, 1]


def test_quorum_loss_is_recorded():
    script = (DATASET + 'drop peer2\ndrop peer3\ndrop peer4\n' + PROPOSE.format(n=0)
              + 'restore peer4\n' + PROPOSE.format(n=1))
    outcome = run_network(5, script)
    assert outcome.stalled == [5]
    assert len(outcome.results) == 1
    assert any('"event":"stall"' in line for line in outcome.trace)


def test_restored_peer_catches_up():
    script = (DATASET + 'drop peer4\n' + PROPOSE.format(n=0) + 'seal\n'
              + PROPOSE.format(n=1) + 'seal\nrestore peer4\n')
    outcome = run_network(5, script)
    heads = {chain.last_digest for chain in outcome.chains.values()}
    assert len(heads) == 1
    assert len(outcome.chains['peer4']) == 2


def test_runtime_errors_report_line():
    with pytest.raises(ScriptError) as excinfo:
        run_network(3, 'seal\npropose peer0 ghost fit workflow_execution\n')
    assert excinfo.value.line_number == 2

    with pytest.raises(ScriptError) as excinfo:
        run_network(3, 'derive nothing peer0 peer1 copy\n')
    assert excinfo.value.line_number == 1


@pytest.mark.parametrize('peers', [0, -1])
def test_network_needs_at_least_one_peer(peers):
    with pytest.raises(ScriptError):
        run_network(peers, DATASET)


def test_join_during_run():
    outcome = run_network(3, 'join late STAGING\n' + DATASET + PROPOSE.format(n=0))
    assert len(outcome.network.peers) == 4
    assert len(outcome.chains['late']) == 1
    assert outcome.results[0].electorate_size == 4


def test_partitioned_acceptance_is_committed_later():
    script = (DATASET + 'sever peer0 peer1\nsever peer0 peer2\nsever peer0 peer3\n'
              'sever peer1 peer4\n'
              'propose peer1 peer2 fit1 workflow_execution workflow=linreg:B>A1\n'
              'propose peer4 peer0 fit2 workflow_execution workflow=linreg:B>A2\n'
              'seal\nrestore peer0\nrestore peer1\nseal\n')
    outcome = run_network(5, script)
    assert outcome.stalled == []
    assert [result.accepted for result in outcome.results] == [True, True]

    early, late = outcome.results
    chain = outcome.chains['peer0']
    assert [tx.asset_id for block in chain for tx in block.transactions] == ['fit2', 'fit1']
    assert chain.find(early.tx_id).logical_time < chain.find(late.tx_id).logical_time
    assert len({c.to_bytes() for c in outcome.chains.values()}) == 1
    registry = outcome.network.peer('peer0').registry
    assert validate_chain(chain, registry).valid
