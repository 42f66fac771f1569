"""
帳本命令服務模組

每個命令都是薄薄的一層：讀寫資料目錄、呼叫函式庫、轉換結束碼。
"""
import shutil
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import pandas as pd

from ..core.access import (
    Direction,
    SideStoreView,
    get_transaction,
    parse_query,
    trace_lineage,
    walk,
)
from ..core.canonical import canonical_dumps, canonical_loads
from ..core.contracts import ExecutionContext, run_workflow
from ..core.ledger import Chain, Transaction, read_ledger, validate_chain, write_ledger
from ..core.membership import MembershipRegistry, read_registry, write_registry, write_seed
from ..core.provenance import (
    WorkflowModification,
    derive_workflow,
    extract_record,
    reconstruct_workflow,
)
from ..core.storage import DatasetStore, ResourceStore
from ..core.workload import ExecutionTrace, run_network
from ..utils.config import CliConfig, PathConfig
from ..utils.errors import (
    DigestMismatch,
    IrrecoverableRecord,
    LedgerFlowError,
    LedgerFormatError,
    NoProvenance,
    ScriptError,
    SerializationError,
    StepFailure,
    UnknownParent,
    UnknownTransaction,
    UnresolvableReference,
)
from ..utils.logger import setup_logger

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_UNREADABLE = 2
EXIT_STALLED = 3
EXIT_IRRECOVERABLE = 4

SideStores = Dict[str, Dict[str, Dict[str, str]]]


class LedgerService:
    """帳本命令列服務類"""

    def __init__(self, config: CliConfig, echo: Callable[[str], None] = print):
        """
        初始化帳本服務

        Args:
            config: 命令列配置
            echo: 命令輸出函式（預設寫到 stdout）
        """
        self.config = config
        self.paths = PathConfig(Path(config.data_dir))
        self.echo = echo
        self.logger = setup_logger(self.__class__.__name__)

    # 資料目錄

    def _datasets(self) -> DatasetStore:
        return DatasetStore(self.paths.datasets_dir)

    def _resources(self) -> ResourceStore:
        return ResourceStore(self.paths.resources_dir)

    def _write_side_store(self, path: Path, stores: SideStores) -> None:
        lines = []
        for channel_id in sorted(stores):
            for tx_id in sorted(stores[channel_id]):
                lines.append(canonical_dumps({
                    'channel_id': channel_id,
                    'state': stores[channel_id][tx_id],
                    'tx_id': tx_id,
                }) + b'\n')
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b''.join(lines))

    def _read_side_store(self, peer: str) -> SideStores:
        path = self.paths.side_store_file(peer)
        stores: SideStores = {}
        if not path.is_file():
            return stores
        for number, line in enumerate(path.read_bytes().splitlines(), start=1):
            try:
                entry = canonical_loads(line)
                stores.setdefault(entry['channel_id'], {})[entry['tx_id']] = dict(entry['state'])
            except (SerializationError, KeyError, TypeError) as e:
                raise LedgerFormatError(f"側存放格式錯誤: {e}", number) from e
        return stores

    def _persist(self, outcome: ExecutionTrace) -> None:
        network = outcome.network
        peers_dir = self.paths.data_dir / 'peers'
        if peers_dir.exists():
            shutil.rmtree(peers_dir)

        for node in network.peers:
            write_ledger(self.paths.ledger_file(node.name), node.chain)
            write_seed(self.paths.key_file(node.name), network.peer_seed(node.name))
            self._write_side_store(self.paths.side_store_file(node.name), node.side_stores)

        registry = max((node.registry for node in network.peers), key=len,
                       default=MembershipRegistry())
        write_registry(self.paths.registry_file, registry)
        self.paths.trace_file.write_bytes(outcome.trace_bytes())

    def _load(self, peer: str) -> Tuple[Chain, MembershipRegistry]:
        chain = read_ledger(self.paths.ledger_file(peer))
        registry = read_registry(self.paths.registry_file)
        return chain, registry

    def _name(self, registry: MembershipRegistry, member_id: str) -> str:
        identity = registry.lookup(member_id)
        return identity.display_name if identity and identity.display_name else member_id[:12]

    def _emit_transactions(self, transactions: List[Transaction],
                           registry: MembershipRegistry) -> None:
        if self.config.porcelain:
            for tx in transactions:
                self.echo(canonical_dumps(tx.to_dict()).decode('utf-8'))
            return
        if not transactions:
            self.echo('(no transactions)')
            return
        self.echo(self._frame(transactions, registry).to_string(index=False))

    def _frame(self, transactions: List[Transaction],
               registry: MembershipRegistry) -> pd.DataFrame:
        rows = [{
            'tx_id': tx.tx_hex,
            'logical_time': tx.logical_time,
            'initiator': self._name(registry, tx.initiator),
            'responder': self._name(registry, tx.responder),
            'asset_id': tx.asset_id,
            'contract_id': tx.contract_id,
            'channel_id': tx.channel_id or '',
            'state_entries': len(tx.state),
        } for tx in transactions]
        return pd.DataFrame(rows, columns=['tx_id', 'logical_time', 'initiator', 'responder',
                                           'asset_id', 'contract_id', 'channel_id',
                                           'state_entries'])

    # 命令

    def cmd_run(self, script_path: str) -> int:
        """
        執行工作負載腳本並寫出各節點帳本與訊息軌跡

        Returns:
            0 成功，2 腳本錯誤，3 有提案無法形成共識
        """
        try:
            text = Path(script_path).read_text(encoding='utf-8')
        except (OSError, UnicodeDecodeError) as e:
            self.logger.error(f"無法讀取腳本: {str(e)}")
            self.echo(f"error: cannot read script {script_path}")
            return EXIT_UNREADABLE

        try:
            outcome = run_network(self.config.peer_count, text, seed=self.config.seed,
                                  batch_size=self.config.batch_size,
                                  datasets=self._datasets(), resources=self._resources())
        except ScriptError as e:
            self.logger.error(f"腳本錯誤: {str(e)}")
            self.echo(f"error: line {e.line_number}: {e}")
            return EXIT_UNREADABLE

        self._persist(outcome)
        for node in outcome.network.peers:
            head = node.chain.last_digest.hex()
            if self.config.porcelain:
                self.echo(canonical_dumps({'blocks': len(node.chain), 'head': head,
                                           'peer': node.name}).decode('utf-8'))
            else:
                self.echo(f"{node.name} blocks={len(node.chain)} head={head}")

        if outcome.stalled:
            lines = ' '.join(str(n) for n in outcome.stalled)
            self.echo(f"stalled: lines {lines}")
            return EXIT_STALLED
        return EXIT_OK

    def cmd_verify(self, ledger_file: Optional[str] = None,
                   registry_file: Optional[str] = None, peer: str = 'peer0') -> int:
        """
        驗證帳本檔案

        Returns:
            0 有效，1 無效，2 無法讀取或被截斷
        """
        try:
            registry = read_registry(registry_file or self.paths.registry_file)
            chain = read_ledger(ledger_file or self.paths.ledger_file(peer))
        except LedgerFormatError as e:
            self.logger.error(f"無法讀取: {str(e)}")
            if e.line_number is not None:
                self.echo(f"unreadable: block {e.line_number - 1}: {e}")
            else:
                self.echo(f"unreadable: {e}")
            return EXIT_UNREADABLE
        except LedgerFlowError as e:
            self.logger.error(f"登錄表無效: {str(e)}")
            self.echo(f"unreadable: {e}")
            return EXIT_UNREADABLE

        report = validate_chain(chain, registry)
        if self.config.porcelain:
            data = {'status': 'valid' if report.valid else 'invalid', 'blocks': len(chain)}
            if not report.valid:
                data['first_failure_index'] = report.first_failure_index
                data['failure_kind'] = report.failure_kind.value
            self.echo(canonical_dumps(data).decode('utf-8'))
        else:
            self.echo(report.to_text())
        return EXIT_OK if report.valid else EXIT_INVALID

    def cmd_walk(self, direction: str = 'forward', expression: str = '',
                 peer: str = 'peer0') -> int:
        """依時間方向走訪符合查詢的交易"""
        try:
            chain, registry = self._load(peer)
            query = parse_query(expression, resolve_name=lambda name: (
                registry.by_name(name).member_id if registry.by_name(name) else None))
        except LedgerFlowError as e:
            self.logger.error(f"無法讀取帳本: {str(e)}")
            return EXIT_UNREADABLE
        except ValueError as e:
            self.logger.error(f"查詢格式錯誤: {str(e)}")
            self.echo(f"error: {e}")
            return EXIT_UNREADABLE

        self._emit_transactions(walk(chain, Direction(direction), query), registry)
        return EXIT_OK

    def cmd_query(self, expression: str, peer: str = 'peer0') -> int:
        """時間正向的查詢"""
        return self.cmd_walk('forward', expression, peer)

    def cmd_lineage(self, tx_id: str, peer: str = 'peer0') -> int:
        """
        列出交易的衍生祖先

        Returns:
            0 成功，1 交易不存在，2 無法讀取
        """
        try:
            chain, _ = self._load(peer)
            view = SideStoreView(self._read_side_store(peer))
            lineage = trace_lineage(chain, tx_id, state_lookup=view)
        except UnknownTransaction:
            self.echo(f"unknown transaction {tx_id}")
            return EXIT_INVALID
        except LedgerFlowError as e:
            self.logger.error(f"無法讀取帳本: {str(e)}")
            return EXIT_UNREADABLE

        for ancestor in lineage.tx_ids:
            self.echo(ancestor)
        if lineage.unresolved is not None:
            self.echo(f"unresolved {lineage.unresolved}")
        return EXIT_OK

    def _committed_outputs(self, state: Mapping[str, str]) -> Dict[str, str]:
        return {key[len('out.'):]: value for key, value in state.items()
                if key.startswith('out.')}

    def cmd_replay(self, tx_id: str, peer: str = 'peer0',
                   dataset_dir: Optional[str] = None) -> int:
        """
        由溯源紀錄重建並重新執行工作流程

        Returns:
            0 輸出摘要全部相符，1 摘要不符，2 無法讀取，4 溯源無法取得或無法重建
        """
        try:
            chain = read_ledger(self.paths.ledger_file(peer))
            side_stores = self._read_side_store(peer)
        except LedgerFormatError as e:
            self.logger.error(f"無法讀取帳本: {str(e)}")
            return EXIT_UNREADABLE

        tx = get_transaction(chain, tx_id)
        if tx is None:
            self.echo(f"unknown transaction {tx_id}")
            return EXIT_IRRECOVERABLE
        state = SideStoreView(side_stores)(tx)

        try:
            record = extract_record(tx, self._resources(), state)
            workflow = reconstruct_workflow(record)
        except DigestMismatch as e:
            self.logger.error(f"溯源資源摘要不符: {str(e)}")
            self.echo(f"mismatch: provenance {e}")
            return EXIT_INVALID
        except (NoProvenance, UnresolvableReference, IrrecoverableRecord) as e:
            self.logger.error(f"無法取得溯源: {str(e)}")
            self.echo(f"irrecoverable: {e}")
            return EXIT_IRRECOVERABLE

        committed = self._committed_outputs(state)
        if not committed and record.content is not None and record.content.events is not None:
            committed = {name: digest.hex()
                         for name, digest in record.content.events.outputs.items()}

        datasets = DatasetStore(dataset_dir) if dataset_dir else self._datasets()
        try:
            result = run_workflow(workflow, ExecutionContext(datasets, ResourceStore()),
                                  tx.logical_time)
        except StepFailure as e:
            self.logger.error(f"重新執行失敗: {str(e)}")
            self.echo(f"mismatch: {e}")
            return EXIT_INVALID

        produced = {name: digest.hex() for name, digest in result.output_digests.items()}
        mismatched = sorted(name for name, digest in committed.items()
                            if produced.get(name) != digest)
        for name in sorted(result.output_digests):
            status = 'MISMATCH' if name in mismatched else 'ok'
            self.echo(f"{name} {result.output_digests[name].hex()} {status}")
        return EXIT_INVALID if mismatched else EXIT_OK

    def cmd_derive(self, tx_id: str, renames: Mapping[str, str], peer: str = 'peer0',
                   asset_id: Optional[str] = None) -> int:
        """
        輸出未簽章的衍生交易草稿

        Returns:
            0 成功，1 父交易不存在或無法重建，2 無法讀取
        """
        try:
            chain = read_ledger(self.paths.ledger_file(peer))
            side_stores = self._read_side_store(peer)
        except LedgerFormatError as e:
            self.logger.error(f"無法讀取帳本: {str(e)}")
            return EXIT_UNREADABLE

        parent = chain.find(tx_id)
        parent_state = SideStoreView(side_stores)(parent) if parent is not None else None
        try:
            draft = derive_workflow(
                chain, tx_id, WorkflowModification(dataset_renames=dict(renames)),
                logical_time=chain.last_sealed_time + 1, asset_id=asset_id,
                resources=self._resources(), parent_state=parent_state,
            )
        except UnknownParent as e:
            self.echo(f"unknown parent {tx_id}")
            self.logger.error(str(e))
            return EXIT_INVALID
        except LedgerFlowError as e:
            self.echo(f"error: {e}")
            self.logger.error(f"無法衍生: {str(e)}")
            return EXIT_INVALID

        self.echo(canonical_dumps(draft.to_dict()).decode('utf-8'))
        return EXIT_OK

    def cmd_export(self, peer: str = 'peer0', fmt: str = 'canonical',
                   output: Optional[str] = None) -> int:
        """
        匯出帳本（正規區塊或交易 CSV）

        Returns:
            0 成功，2 無法讀取
        """
        try:
            chain, registry = self._load(peer)
        except LedgerFlowError as e:
            self.logger.error(f"無法讀取帳本: {str(e)}")
            return EXIT_UNREADABLE

        if fmt == 'csv':
            text = self._frame(list(chain.transactions()), registry).to_csv(index=False)
        else:
            text = chain.to_bytes().decode('utf-8')

        if output:
            Path(output).write_text(text, encoding='utf-8')
            self.logger.info(f"已匯出 {len(chain)} 個區塊到 {output}")
        else:
            self.echo(text.rstrip('\n'))
        return EXIT_OK

    def cmd_channel(self, peer: str = 'peer0') -> int:
        """列出節點側存放中的私有交易狀態"""
        try:
            stores = self._read_side_store(peer)
        except LedgerFormatError as e:
            self.logger.error(f"無法讀取側存放: {str(e)}")
            return EXIT_UNREADABLE

        for channel_id in sorted(stores):
            for tx_id in sorted(stores[channel_id]):
                state = stores[channel_id][tx_id]
                if self.config.porcelain:
                    self.echo(canonical_dumps({'channel_id': channel_id, 'state': state,
                                               'tx_id': tx_id}).decode('utf-8'))
                else:
                    keys = ' '.join(sorted(state))
                    self.echo(f"{channel_id[:12]} {tx_id} {keys}")
        return EXIT_OK
