"""
共用測試夾具
"""
import hashlib
import os
import tempfile

# 日誌記錄器在匯入時建立檔案處理器，必須先指定目錄
os.environ.setdefault('LEDGERFLOW_LOG_DIR', tempfile.mkdtemp(prefix='ledgerflow-logs-'))

import pytest  # noqa: E402

from ledgerflow.core.contracts import ExecutionContext, parse_workflow_notation  # noqa: E402
from ledgerflow.core.ledger import Chain, Transaction, seal_block  # noqa: E402
from ledgerflow.core.membership import (  # noqa: E402
    JoinRequest,
    MembershipRegistry,
    Role,
    approve,
    approve_join,
    generate_identity,
)
from ledgerflow.core.storage import DatasetStore, ResourceStore  # noqa: E402
from ledgerflow.utils.config import CliConfig  # noqa: E402

# 斜率 2、截距 1 的精確直線
LINE_POINTS = [(0.0, 1.0), (1.0, 3.0), (2.0, 5.0), (3.0, 7.0)]
# 斜率 2、截距 2
OTHER_POINTS = [(0.0, 2.0), (1.0, 4.0), (2.0, 6.0)]

DEMO_SCRIPT = """\
# 五個節點、三個工作流程、一個衍生、一筆私有交易
dataset B 0,1 1,3 2,5 3,7
dataset D 0,2 1,4 2,6
propose peer0 peer1 fitA workflow_execution workflow=linreg:B>A,store:A>C
propose peer1 peer2 scaled workflow_execution workflow=scale:B>B2@factor=2,linreg:B2>A2 prov=embedded repr=tree
propose peer2 peer0 fitD workflow_execution workflow=linreg:D>E prov=reference repr=events
seal
derive fitA peer0 peer3 fitA2 B=D
channel lab peer0 peer1 peer2
private lab peer0 peer1 secret workflow_execution workflow=linreg:B>S note=confidential-result
"""


def seed_for(label: str) -> bytes:
    return hashlib.sha256(f"test:{label}".encode('utf-8')).digest()


@pytest.fixture
def signers():
    """五個確定性的身分"""
    roles = [Role.WMS, Role.CLIENT, Role.STAGING, Role.WMS, Role.CLIENT]
    return [generate_identity(role, seed_for(f"peer{i}"), f"peer{i}")[1]
            for i, role in enumerate(roles)]


def build_registry(signers) -> MembershipRegistry:
    registry = MembershipRegistry()
    for time, signer in enumerate(signers):
        approvals = [approve(existing, signer.identity) for existing in signers[:time]]
        registry = approve_join(registry, JoinRequest.create(signer), approvals, time)
    return registry


@pytest.fixture
def registry(signers):
    return build_registry(signers)


@pytest.fixture
def make_tx(signers):
    """建立已簽章交易的工廠"""

    def factory(time: int, *, sender: int = 0, receiver: int = 1, asset: str = 'asset',
                contract: str = 'workflow_execution', state=None, channel_id=None):
        tx = Transaction(
            initiator=signers[sender].member_id,
            responder=signers[receiver].member_id,
            asset_id=asset,
            contract_id=contract,
            logical_time=time,
            state=state or {},
            channel_id=channel_id,
        )
        return tx.signed(signers[sender])

    return factory


@pytest.fixture
def make_chain(make_tx):
    """依每區塊交易數建立雜湊鏈的工廠"""

    def factory(block_sizes, state_fn=None) -> Chain:
        chain = Chain()
        time = 1
        for size in block_sizes:
            batch = []
            for _ in range(size):
                state = state_fn(time) if state_fn else {'note': f"entry-{time:06d}"}
                batch.append(make_tx(time, sender=time % 5, receiver=(time + 1) % 5,
                                     asset=f"asset{time}", state=state))
                time += 1
            seal_block(batch, chain, accepted={tx.tx_hex for tx in batch})
        return chain

    return factory


@pytest.fixture
def datasets():
    store = DatasetStore()
    store.put_points('B', LINE_POINTS)
    store.put_points('D', OTHER_POINTS)
    return store


@pytest.fixture
def resources():
    return ResourceStore()


@pytest.fixture
def context(datasets, resources):
    return ExecutionContext(datasets, resources)


@pytest.fixture
def linreg_workflow():
    return parse_workflow_notation('linreg:B>A,store:A>C')


@pytest.fixture
def data_dir(tmp_path, monkeypatch):
    for name in ('LEDGERFLOW_DATA_DIR', 'LEDGERFLOW_SEED', 'LEDGERFLOW_BATCH_SIZE',
                 'LEDGERFLOW_PEERS'):
        monkeypatch.delenv(name, raising=False)
    path = tmp_path / 'data'
    path.mkdir()
    return path


@pytest.fixture
def cli_config(data_dir):
    return CliConfig(data_dir=data_dir)


@pytest.fixture
def demo_script(tmp_path):
    path = tmp_path / 'demo.script'
    path.write_text(DEMO_SCRIPT, encoding='utf-8')
    return path
