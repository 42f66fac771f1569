import itertools

import pandas as pd
import pytest

from ledgerflow.core.access import find_asset
from ledgerflow.core.canonical import canonical_loads
from ledgerflow.core.ledger import read_ledger
from ledgerflow.services.ledger_service import (
    EXIT_INVALID,
    EXIT_IRRECOVERABLE,
    EXIT_OK,
    EXIT_STALLED,
    EXIT_UNREADABLE,
    LedgerService,
)
from ledgerflow.utils.config import CliConfig, Config, PathConfig

import main


@pytest.fixture
def output():
    return []


@pytest.fixture
def service(cli_config, output):
    return LedgerService(cli_config, echo=output.append)


@pytest.fixture
def demo_run(service, demo_script, output):
    assert service.cmd_run(str(demo_script)) == EXIT_OK
    output.clear()
    return service


def _tx_id(service, asset, peer='peer0'):
    chain = read_ledger(service.paths.ledger_file(peer))
    return find_asset(chain, asset)[-1].tx_hex


def test_run_writes_identical_ledgers(service, demo_script, output, data_dir):
    assert service.cmd_run(str(demo_script)) == EXIT_OK
    paths = PathConfig(data_dir)
    ledgers = [paths.ledger_file(f"peer{i}").read_bytes() for i in range(5)]
    for first, second in itertools.combinations(ledgers, 2):
        assert first == second
    assert paths.registry_file.is_file()
    assert paths.trace_file.read_bytes()
    assert len(output) == 5
    assert output[0].startswith('peer0 blocks=2 head=')


def test_run_is_reproducible(tmp_path, demo_script):
    runs = []
    for name in ('one', 'two'):
        config = CliConfig(data_dir=tmp_path / name)
        LedgerService(config, echo=lambda line: None).cmd_run(str(demo_script))
        paths = PathConfig(tmp_path / name)
        runs.append([paths.ledger_file(f"peer{i}").read_bytes() for i in range(5)]
                    + [paths.trace_file.read_bytes()])
    assert runs[0] == runs[1]


def test_run_malformed_script(service, tmp_path, output):
    script = tmp_path / 'bad.script'
    script.write_text('seal\nseal\nwhatever x\n', encoding='utf-8')
    assert service.cmd_run(str(script)) == EXIT_UNREADABLE
    assert output[0].startswith('error: line 3')


def test_run_missing_script(service, tmp_path):
    assert service.cmd_run(str(tmp_path / 'missing.script')) == EXIT_UNREADABLE


def test_run_quorum_loss(service, tmp_path, output):
    script = tmp_path / 'stall.script'
    script.write_text('dataset B 0,1 1,3\ndrop peer2\ndrop peer3\ndrop peer4\n'
                      'propose peer0 peer1 fit workflow_execution workflow=linreg:B>A\n',
                      encoding='utf-8')
    assert service.cmd_run(str(script)) == EXIT_STALLED
    assert output[-1] == 'stalled: lines 5'


def test_verify_untampered(demo_run, output):
    assert demo_run.cmd_verify() == EXIT_OK
    assert output == ['valid']


def test_verify_flipped_digit(demo_run, output):
    path = demo_run.paths.ledger_file('peer0')
    lines = path.read_bytes().split(b'\n')
    digest = canonical_loads(lines[1])['block_digest']
    flipped = ('0' if digest[0] != '0' else '1') + digest[1:]
    lines[1] = lines[1].replace(digest.encode('ascii'), flipped.encode('ascii'))
    path.write_bytes(b'\n'.join(lines))
    assert demo_run.cmd_verify() == EXIT_INVALID
    assert output[0].startswith('invalid: block 1 ')


def test_verify_truncated(demo_run, output):
    path = demo_run.paths.ledger_file('peer2')
    path.write_bytes(path.read_bytes()[:-7])
    assert demo_run.cmd_verify(peer='peer2') == EXIT_UNREADABLE
    assert output[0].startswith('unreadable: block 1')


def test_verify_porcelain(data_dir, demo_script):
    output = []
    service = LedgerService(CliConfig(data_dir=data_dir, porcelain=True), echo=output.append)
    service.cmd_run(str(demo_script))
    output.clear()
    assert service.cmd_verify(peer='peer4') == EXIT_OK
    assert canonical_loads(output[0]) == {'blocks': 2, 'status': 'valid'}


def test_replay_demo_workflow(demo_run, output):
    assert demo_run.cmd_replay(_tx_id(demo_run, 'fitA')) == EXIT_OK
    assert [line.split()[0] for line in output] == ['A', 'C']
    assert all(line.endswith(' ok') for line in output)


def test_replay_each_capture_style(demo_run):
    for asset in ('scaled', 'fitD', 'fitA2'):
        assert demo_run.cmd_replay(_tx_id(demo_run, asset)) == EXIT_OK


def test_replay_after_dataset_change(demo_run, output):
    (demo_run.paths.datasets_dir / 'B').write_bytes(b'0 1\n1 4\n')
    assert demo_run.cmd_replay(_tx_id(demo_run, 'fitA')) == EXIT_INVALID
    assert any(line.endswith('MISMATCH') for line in output)


def test_replay_private_transaction(demo_run):
    tx_id = _tx_id(demo_run, 'secret')
    assert demo_run.cmd_replay(tx_id, peer='peer1') == EXIT_OK
    assert demo_run.cmd_replay(tx_id, peer='peer3') == EXIT_IRRECOVERABLE


def test_replay_unknown_transaction(demo_run):
    assert demo_run.cmd_replay('f' * 64) == EXIT_IRRECOVERABLE


def test_replay_missing_reference(demo_run, output):
    tx_id = _tx_id(demo_run, 'fitD')
    for resource in demo_run.paths.resources_dir.iterdir():
        resource.unlink()
    assert demo_run.cmd_replay(tx_id) == EXIT_IRRECOVERABLE


def test_lineage_command(demo_run, output):
    assert demo_run.cmd_lineage(_tx_id(demo_run, 'fitA2')) == EXIT_OK
    assert output == [_tx_id(demo_run, 'fitA')]
    output.clear()
    assert demo_run.cmd_lineage('f' * 64) == EXIT_INVALID


def test_query_and_walk(demo_run, output):
    assert demo_run.cmd_query('from=peer2') == EXIT_OK
    assert 'fitD' in output[0] and 'fitA ' not in output[0]
    output.clear()
    assert demo_run.cmd_walk('backward', 'channel=yes') == EXIT_OK
    assert 'secret' in output[0]
    output.clear()
    assert demo_run.cmd_query('asset=nothing') == EXIT_OK
    assert output == ['(no transactions)']
    assert demo_run.cmd_query('bogus') == EXIT_UNREADABLE


def test_derive_prints_draft(demo_run, output):
    parent = _tx_id(demo_run, 'fitA')
    assert demo_run.cmd_derive(parent, {'B': 'D'}, asset_id='copy') == EXIT_OK
    draft = canonical_loads(output[0])
    assert draft['asset_id'] == 'copy'
    assert draft['state']['parent.txid'] == parent
    assert 'signature' not in draft
    assert demo_run.cmd_derive('f' * 64, {}) == EXIT_INVALID


def test_export_csv(demo_run, tmp_path):
    target = tmp_path / 'ledger.csv'
    assert demo_run.cmd_export(fmt='csv', output=str(target)) == EXIT_OK
    frame = pd.read_csv(target)
    assert len(frame) == 5
    assert set(frame['asset_id']) == {'fitA', 'scaled', 'fitD', 'fitA2', 'secret'}


def test_export_canonical(demo_run, output):
    assert demo_run.cmd_export() == EXIT_OK
    assert (output[0] + '\n').encode('utf-8') == \
        demo_run.paths.ledger_file('peer0').read_bytes()


def test_channel_listing(demo_run, output):
    assert demo_run.cmd_channel('peer1') == EXIT_OK
    assert len(output) == 1 and 'note' in output[0]
    output.clear()
    assert demo_run.cmd_channel('peer4') == EXIT_OK
    assert output == []


def test_config_reads_environment(monkeypatch, tmp_path):
    monkeypatch.setenv('LEDGERFLOW_SEED', '7')
    monkeypatch.setenv('LEDGERFLOW_BATCH_SIZE', '0')
    config = Config(str(tmp_path / 'absent.env'))
    assert config.network.seed == 7
    assert config.validate() is False
    cli = config.cli_config(data_dir=str(tmp_path), batch_size=3, peers=2)
    assert (cli.batch_size, cli.peer_count, cli.seed) == (3, 2, 7)
    assert config.validate() is True


def test_main_exit_codes(data_dir, demo_script, capsys):
    base = ['--data-dir', str(data_dir), '--log-level', 'ERROR']
    assert main.main(base + ['run', str(demo_script)]) == 0
    assert 'peer4 blocks=2' in capsys.readouterr().out
    assert main.main(base + ['verify', '--peer', 'peer3']) == 0
    assert main.main(base + ['--batch-size', '0', 'verify']) == 2
    assert main.main(base + ['lineage', 'f' * 64]) == 1
