"""
工作負載腳本模組

逐行的腳本指令：
    join <name> <role>
    propose <initiator> <responder> <asset> <contract> [key=value...]
    seal
    drop <peer> / restore <peer> / sever <a> <b>
    dataset <name> <x>,<y> ...
    channel <label> <member> <member> ...
    private <label> <initiator> <responder> <asset> <contract> [key=value...]
    derive <parent-asset> <initiator> <responder> <asset> [old=new...]

保留鍵 workflow=、prov=、repr= 分別指定工作流程、擷取方式與溯源表示法。
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .access import Channel, create_channel, find_asset, submit_private
from .contracts import (
    WORKFLOW_CONTRACT_ID,
    WORKFLOW_KEY,
    WorkflowDescription,
    execute_contract,
    parse_workflow_notation,
)
from .ledger import Chain, Transaction
from .membership import Role
from .network import (
    ConsensusResult,
    Fault,
    FaultKind,
    PeerNode,
    SimNetwork,
    inject_fault,
    propose_transaction,
)
from .provenance import (
    CaptureMode,
    Representation,
    WorkflowModification,
    capture_provenance,
    derive_workflow,
)
from .storage import DatasetStore, ResourceStore
from ..utils.errors import (
    ChannelAccessDenied,
    LedgerFlowError,
    NetworkStalled,
    ScriptError,
    UnknownParent,
)
from ..utils.logger import setup_logger

ROLE_CYCLE = (Role.WMS, Role.CLIENT, Role.STAGING)

# 動詞: (位置參數數量, 是否接受 key=value, 最少額外參數)
_GRAMMAR: Dict[str, Tuple[int, bool, int]] = {
    'join': (2, False, 0),
    'propose': (4, True, 0),
    'seal': (0, False, 0),
    'drop': (1, False, 0),
    'restore': (1, False, 0),
    'sever': (2, False, 0),
    'dataset': (1, False, 1),
    'channel': (1, False, 2),
    'private': (5, True, 0),
    'derive': (4, True, 0),
}

_MODES = {'embedded': CaptureMode.EMBEDDED, 'reference': CaptureMode.REFERENCE,
          'both': CaptureMode.BOTH}

logger = setup_logger('workload')


@dataclass(frozen=True)
class ScriptCommand:
    """一行腳本指令"""
    line_number: int
    verb: str
    args: Tuple[str, ...]
    options: Mapping[str, str] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash((self.line_number, self.verb, self.args))


def parse_script(text: str) -> List[ScriptCommand]:
    """
    解析工作負載腳本

    Args:
        text: 腳本內容

    Returns:
        指令列表
    """
    commands = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        verb, *tokens = line.split()
        if verb not in _GRAMMAR:
            raise ScriptError(f"未知的指令 {verb!r}", number)
        positional, keyed, extra = _GRAMMAR[verb]

        args = tokens[:positional]
        rest = tokens[positional:]
        if len(args) != positional:
            raise ScriptError(f"{verb} 需要 {positional} 個參數", number)

        options: Dict[str, str] = {}
        if keyed:
            for token in rest:
                key, sep, value = token.partition('=')
                if not sep or not key:
                    raise ScriptError(f"參數必須是 key=value: {token!r}", number)
                if key in options:
                    raise ScriptError(f"重複的參數 {key!r}", number)
                options[key] = value
        else:
            if len(rest) < extra or (extra == 0 and rest):
                raise ScriptError(f"{verb} 的參數數量錯誤", number)
            args = tokens

        _check_command(verb, args, options, number)
        commands.append(ScriptCommand(number, verb, tuple(args), options))
    return commands


def _check_command(verb: str, args: Sequence[str], options: Mapping[str, str],
                   number: int) -> None:
    if verb == 'join' and args[1] not in Role.__members__:
        raise ScriptError(f"未知的角色 {args[1]!r}", number)
    if verb == 'dataset':
        for point in args[1:]:
            try:
                x, y = point.split(',')
                float(x), float(y)
            except ValueError:
                raise ScriptError(f"資料點格式錯誤 {point!r}", number) from None
    if 'prov' in options and options['prov'] not in _MODES:
        raise ScriptError(f"prov 只接受 {sorted(_MODES)}", number)
    if 'repr' in options and options['repr'] not in ('tree', 'events'):
        raise ScriptError("repr 只接受 tree/events", number)
    if WORKFLOW_KEY in options:
        try:
            parse_workflow_notation(options[WORKFLOW_KEY])
        except LedgerFlowError as e:
            raise ScriptError(str(e), number) from e


@dataclass
class ExecutionTrace:
    """run_network 的執行結果"""
    network: SimNetwork
    datasets: DatasetStore
    resources: ResourceStore
    channels: Dict[str, Channel] = field(default_factory=dict)
    results: List[ConsensusResult] = field(default_factory=list)
    stalled: List[int] = field(default_factory=list)

    @property
    def chains(self) -> Dict[str, Chain]:
        return self.network.chains()

    @property
    def trace(self) -> List[str]:
        return self.network.trace

    def trace_bytes(self) -> bytes:
        return ''.join(line + '\n' for line in self.trace).encode('utf-8')


class WorkloadRunner:
    """依序執行腳本指令"""

    def __init__(self, network: SimNetwork, datasets: DatasetStore, resources: ResourceStore):
        self.logger = setup_logger(self.__class__.__name__)
        self.network = network
        self.outcome = ExecutionTrace(network, datasets, resources)

    def run(self, commands: Sequence[ScriptCommand]) -> ExecutionTrace:
        for command in commands:
            try:
                getattr(self, f"_do_{command.verb}")(command)
            except NetworkStalled as e:
                self.outcome.stalled.append(command.line_number)
                self.logger.warning(f"第 {command.line_number} 行無法形成共識: {str(e)}")
            except ScriptError:
                raise
            except (LedgerFlowError, KeyError, ValueError) as e:
                raise ScriptError(f"{command.verb} 執行失敗: {str(e)}",
                                  command.line_number) from e

        if self.network.live_peers():
            self.network.seal()
            self.network.converge()
        return self.outcome

    def _split_options(self, options: Mapping[str, str]
                       ) -> Tuple[Dict[str, str], CaptureMode, Representation]:
        state = dict(options)
        mode = _MODES[state.pop('prov', 'both')]
        representation = Representation(state.pop('repr', 'events'))
        if WORKFLOW_KEY in state:
            state[WORKFLOW_KEY] = parse_workflow_notation(state[WORKFLOW_KEY]).serialize()
        return state, mode, representation

    def _prepare(self, initiator: PeerNode, responder: PeerNode, asset_id: str,
                 contract_id: str, state: Mapping[str, str], mode: CaptureMode,
                 representation: Representation, channel_id: Optional[str] = None
                 ) -> Transaction:
        """以模擬時鐘蓋時間戳，並在提案節點上執行合約"""
        tx = Transaction(initiator.member_id, responder.member_id, asset_id, contract_id,
                         self.network.tick(), state, channel_id=channel_id)
        contract = initiator.contracts.lookup(contract_id)
        if contract is None or not contract.precondition(tx.state):
            return tx

        result = execute_contract(contract_id, tx, self.outcome.datasets,
                                  self.outcome.resources, initiator.contracts)
        self.network.advance_to(tx.logical_time + len(result.execution_trace))
        if contract_id == WORKFLOW_CONTRACT_ID and result.execution_trace:
            workflow = WorkflowDescription.parse(tx.state[WORKFLOW_KEY])
            return capture_provenance(tx, result, workflow, mode, representation,
                                      self.outcome.resources)
        return tx.with_state({**tx.state, **result.state_entries})

    def _submit(self, tx: Transaction, initiator: PeerNode) -> None:
        if tx.channel_id is not None:
            channel = initiator.channels.get(tx.channel_id)
            if channel is None:
                raise ChannelAccessDenied(f"{initiator.name} 不在頻道 {tx.channel_id[:12]} 中")
            result = submit_private(channel, tx, self.network)
        else:
            result = propose_transaction(self.network, initiator.name, tx.signed(initiator.signer))
        self.outcome.results.append(result)

    def _do_join(self, command: ScriptCommand) -> None:
        self.network.add_peer(command.args[0], Role(command.args[1]))

    def _do_propose(self, command: ScriptCommand) -> None:
        initiator, responder, asset_id, contract_id = command.args
        state, mode, representation = self._split_options(command.options)
        node = self.network.peer(initiator)
        tx = self._prepare(node, self.network.peer(responder), asset_id, contract_id,
                           state, mode, representation)
        self._submit(tx, node)

    def _do_private(self, command: ScriptCommand) -> None:
        label, initiator, responder, asset_id, contract_id = command.args
        channel = self.outcome.channels[label]
        state, mode, representation = self._split_options(command.options)
        node = self.network.peer(initiator)
        tx = self._prepare(node, self.network.peer(responder), asset_id, contract_id,
                           state, mode, representation, channel_id=channel.channel_id)
        self._submit(tx, node)

    def _do_derive(self, command: ScriptCommand) -> None:
        parent_asset, initiator, responder, asset_id = command.args
        options = dict(command.options)
        mode = _MODES[options.pop('prov', 'both')]
        representation = Representation(options.pop('repr', 'events'))

        node = self.network.peer(initiator)
        candidates = find_asset(node.chain, parent_asset)
        if not candidates:
            raise UnknownParent(f"帳本中沒有資產 {parent_asset}")
        parent = candidates[-1]
        parent_state = node.side_state(parent.tx_hex) if parent.channel_id else None

        draft = derive_workflow(
            node.chain, parent, WorkflowModification(dataset_renames=options),
            logical_time=self.network.clock, asset_id=asset_id,
            initiator=node.member_id, responder=self.network.peer(responder).member_id,
            resources=self.outcome.resources, parent_state=parent_state,
        )
        tx = self._prepare(node, self.network.peer(responder), asset_id, draft.contract_id,
                           draft.state, mode, representation, channel_id=draft.channel_id)
        self._submit(tx, node)

    def _do_seal(self, command: ScriptCommand) -> None:
        self.network.seal()

    def _do_drop(self, command: ScriptCommand) -> None:
        inject_fault(self.network, Fault(FaultKind.DROP, command.args[0]))

    def _do_restore(self, command: ScriptCommand) -> None:
        inject_fault(self.network, Fault(FaultKind.RESTORE, command.args[0]))

    def _do_sever(self, command: ScriptCommand) -> None:
        inject_fault(self.network, Fault(FaultKind.SEVER, command.args[0], command.args[1]))

    def _do_dataset(self, command: ScriptCommand) -> None:
        name, *points = command.args
        parsed = [tuple(float(v) for v in point.split(',')) for point in points]
        self.outcome.datasets.put_points(name, parsed)

    def _do_channel(self, command: ScriptCommand) -> None:
        label, *names = command.args
        if label in self.outcome.channels:
            raise ScriptError(f"頻道 {label} 已存在", command.line_number)
        members = [self.network.peer(name).member_id for name in names]
        registry = self.network.sealer().registry
        self.outcome.channels[label] = create_channel(
            members, registry, created=self.network.tick(), label=label, network=self.network)


def run_network(peer_count: int, script: Union[str, Sequence[ScriptCommand]], seed: int = 42,
                batch_size: int = 4, max_latency: int = 3,
                datasets: Optional[DatasetStore] = None,
                resources: Optional[ResourceStore] = None) -> ExecutionTrace:
    """
    在確定性排程下執行工作負載

    先建立 peer0..peer{n-1}（角色依 WMS、CLIENT、STAGING 輪替），再執行腳本，
    最後封存剩餘的待封存交易並讓存活節點同步。

    Args:
        peer_count: 預先建立的節點數
        script: 腳本文字或已解析的指令
        seed: 亂數種子
        batch_size: 自動封存門檻
        max_latency: 訊息延遲上限
        datasets: 共用的資料集存放
        resources: 共用的資源存放

    Returns:
        各節點的鏈、訊息軌跡與共識結果
    """
    if peer_count < 1:
        raise ScriptError(f"節點數至少為 1: {peer_count}")
    commands = parse_script(script) if isinstance(script, str) else list(script)

    network = SimNetwork(seed=seed, max_latency=max_latency, batch_size=batch_size)
    for index in range(peer_count):
        network.add_peer(f"peer{index}", ROLE_CYCLE[index % len(ROLE_CYCLE)])

    runner = WorkloadRunner(network,
                            datasets if datasets is not None else DatasetStore(),
                            resources if resources is not None else ResourceStore())
    outcome = runner.run(commands)
    logger.info(f"工作負載完成：{len(outcome.results)} 筆提案，{len(outcome.stalled)} 筆停滯")
    return outcome
