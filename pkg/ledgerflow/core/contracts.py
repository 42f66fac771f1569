"""
智能合約引擎與內建工作流程合約模組

合約是所有節點上相同註冊的原生處理函式，不載入外部程式碼。
步驟函式庫：linreg、scale、store。
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .canonical import Digest, canonical_dumps, canonical_loads, compute_digest, render_real
from .ledger import Transaction
from .storage import DatasetStore, Point, ResourceStore, decode_dataset, encode_dataset
from ..utils.errors import (
    ContractNotFound,
    DegenerateInput,
    DuplicateContract,
    MalformedWorkflow,
    SerializationError,
    StepFailure,
)
from ..utils.logger import setup_logger

WORKFLOW_CONTRACT_ID = 'workflow_execution'
STAGING_CONTRACT_ID = 'data_staging'
WORKFLOW_KEY = 'workflow'
RESERVED_PREFIX = 'prov.'
MAX_STEPS = 10

# 每個步驟的固定輸入/輸出角色
STEP_ROLES: Dict[str, Tuple[str, str]] = {
    'linreg': ('points', 'fit'),
    'scale': ('points', 'scaled'),
    'store': ('data', 'file'),
}

logger = setup_logger('contracts')


@dataclass(frozen=True)
class Step:
    """工作流程的一個步驟"""
    op: str
    inputs: Mapping[str, str]
    outputs: Mapping[str, str]
    params: Mapping[str, str] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash((self.op, tuple(sorted(self.inputs.items())),
                     tuple(sorted(self.outputs.items())), tuple(sorted(self.params.items()))))

    @property
    def input_name(self) -> str:
        return self.inputs[STEP_ROLES[self.op][0]]

    @property
    def output_name(self) -> str:
        return self.outputs[STEP_ROLES[self.op][1]]

    def to_dict(self) -> dict:
        return {
            'inputs': dict(self.inputs),
            'op': self.op,
            'outputs': dict(self.outputs),
            'params': dict(self.params),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'Step':
        return cls(op=data['op'], inputs=dict(data['inputs']),
                   outputs=dict(data['outputs']), params=dict(data['params']))

    @classmethod
    def simple(cls, op: str, source: str, target: str, **params: str) -> 'Step':
        """以固定角色建立單輸入單輸出步驟"""
        if op not in STEP_ROLES:
            raise MalformedWorkflow(f"未知的步驟 {op!r}")
        in_role, out_role = STEP_ROLES[op]
        return cls(op, {in_role: source}, {out_role: target},
                   {k: str(v) for k, v in params.items()})


@dataclass(frozen=True)
class WorkflowDescription:
    """確定性的有序步驟列表"""
    steps: Tuple[Step, ...]

    def __post_init__(self):
        object.__setattr__(self, 'steps', tuple(self.steps))

    def validate(self) -> None:
        """檢查步驟合法且依拓撲順序排列"""
        if not self.steps:
            raise MalformedWorkflow("工作流程沒有步驟")
        if len(self.steps) > MAX_STEPS:
            raise MalformedWorkflow(f"步驟數 {len(self.steps)} 超過上限 {MAX_STEPS}")

        produced_later = {}
        for index, step in enumerate(self.steps):
            for name in step.outputs.values():
                if name in produced_later:
                    raise MalformedWorkflow(f"資料 {name} 被重複產生")
                produced_later[name] = index

        for index, step in enumerate(self.steps):
            if step.op not in STEP_ROLES:
                raise MalformedWorkflow(f"步驟 {index} 使用未知操作 {step.op!r}")
            in_role, out_role = STEP_ROLES[step.op]
            if set(step.inputs) != {in_role} or set(step.outputs) != {out_role}:
                raise MalformedWorkflow(f"步驟 {index} ({step.op}) 的角色不正確")
            source = step.input_name
            if source in produced_later and produced_later[source] >= index:
                raise MalformedWorkflow(f"步驟 {index} 使用尚未產生的資料 {source}")
            if step.op == 'scale':
                try:
                    float(step.params['factor'])
                except (KeyError, ValueError):
                    raise MalformedWorkflow(f"步驟 {index} 缺少合法的 factor 參數") from None

        stray = self.unreachable_names()
        if stray:
            raise MalformedWorkflow(f"資料 {', '.join(stray)} 不在最終結果 "
                                    f"{self.final_name} 的衍生路徑上")

    @property
    def final_name(self) -> str:
        """最終結果：最後一個計算步驟的輸出；只有 store 時為最後一步的輸入"""
        computed = [step for step in self.steps if step.op != 'store']
        if computed:
            return computed[-1].output_name
        return self.steps[-1].input_name

    def unreachable_names(self) -> List[str]:
        """
        不在最終結果衍生路徑上的資料

        由最終結果沿計算步驟往回追溯其來源，再沿 store 步驟加入存放的檔案。

        Returns:
            依出現順序列出無法由最終結果到達的資料名稱
        """
        producers = {step.output_name: step for step in self.steps if step.op != 'store'}
        reached = {self.final_name}
        pending = [self.final_name]
        while pending:
            step = producers.get(pending.pop())
            if step is not None and step.input_name not in reached:
                reached.add(step.input_name)
                pending.append(step.input_name)
        for step in self.steps:
            if step.op == 'store' and step.input_name in reached:
                reached.add(step.output_name)

        names = []
        for step in self.steps:
            for name in (step.input_name, step.output_name):
                if name not in reached and name not in names:
                    names.append(name)
        return names

    @property
    def input_names(self) -> List[str]:
        """工作流程輸入：被使用但不由任何步驟產生的資料"""
        produced = {step.output_name for step in self.steps}
        names = []
        for step in self.steps:
            if step.input_name not in produced and step.input_name not in names:
                names.append(step.input_name)
        return names

    @property
    def output_names(self) -> List[str]:
        return [step.output_name for step in self.steps]

    def to_dict(self) -> dict:
        return {'steps': [step.to_dict() for step in self.steps]}

    def serialize(self) -> str:
        return canonical_dumps(self.to_dict()).decode('utf-8')

    @classmethod
    def from_dict(cls, data: dict) -> 'WorkflowDescription':
        workflow = cls(tuple(Step.from_dict(step) for step in data['steps']))
        workflow.validate()
        return workflow

    @classmethod
    def parse(cls, text: str) -> 'WorkflowDescription':
        try:
            return cls.from_dict(canonical_loads(text))
        except (SerializationError, KeyError, TypeError, AttributeError) as e:
            raise MalformedWorkflow(f"無法解析工作流程: {e}") from e

    def substitute(self, renames: Mapping[str, str]) -> 'WorkflowDescription':
        """替換資料集名稱（衍生工作流程用）"""
        steps = tuple(
            Step(step.op,
                 {role: renames.get(name, name) for role, name in step.inputs.items()},
                 {role: renames.get(name, name) for role, name in step.outputs.items()},
                 dict(step.params))
            for step in self.steps
        )
        return WorkflowDescription(steps)


def parse_workflow_notation(text: str) -> WorkflowDescription:
    """
    解析腳本用的精簡工作流程表示法

    例如 `linreg:B>A,store:A>C` 或 `scale:B>B2@factor=2,linreg:B2>A`

    Args:
        text: 精簡表示法

    Returns:
        工作流程描述
    """
    steps = []
    for chunk in text.split(','):
        chunk = chunk.strip()
        head, *param_parts = chunk.split('@')
        try:
            op, flow = head.split(':', 1)
            source, target = flow.split('>', 1)
        except ValueError:
            raise MalformedWorkflow(f"無法解析步驟 {chunk!r}") from None
        params = {}
        for part in param_parts:
            key, sep, value = part.partition('=')
            if not sep:
                raise MalformedWorkflow(f"參數格式錯誤 {part!r}")
            params[key] = value
        steps.append(Step.simple(op.strip(), source.strip(), target.strip(), **params))
    workflow = WorkflowDescription(tuple(steps))
    workflow.validate()
    return workflow


@dataclass(frozen=True)
class StepEvent:
    """步驟執行事件"""
    step_index: int
    op: str
    input_digests: Mapping[str, Digest]
    output_digests: Mapping[str, Digest]
    logical_time: int
    params: Mapping[str, str] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash((self.step_index, self.op, self.logical_time))

    def to_dict(self) -> dict:
        return {
            'input_digests': dict(self.input_digests),
            'logical_time': self.logical_time,
            'op': self.op,
            'output_digests': dict(self.output_digests),
            'params': dict(self.params),
            'step_index': self.step_index,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'StepEvent':
        return cls(
            step_index=data['step_index'],
            op=data['op'],
            input_digests={k: Digest.from_hex(v) for k, v in data['input_digests'].items()},
            output_digests={k: Digest.from_hex(v) for k, v in data['output_digests'].items()},
            logical_time=data['logical_time'],
            params=dict(data['params']),
        )


@dataclass(frozen=True)
class ContractResult:
    """合約執行結果"""
    state_entries: Mapping[str, str]
    execution_trace: Tuple[StepEvent, ...] = ()
    output_digests: Mapping[str, Digest] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'execution_trace': [event.to_dict() for event in self.execution_trace],
            'output_digests': dict(self.output_digests),
            'state_entries': dict(self.state_entries),
        }

    def canonical_bytes(self) -> bytes:
        return canonical_dumps(self.to_dict())


@dataclass
class ExecutionContext:
    """合約執行環境"""
    datasets: DatasetStore
    resources: ResourceStore


Handler = Callable[[Transaction, ExecutionContext], ContractResult]
Precondition = Callable[[Mapping[str, str]], bool]


@dataclass(frozen=True)
class Contract:
    """已註冊的合約"""
    contract_id: str
    description: str
    handler: Handler
    precondition: Precondition


class ContractRegistry:
    """節點上的合約註冊表"""

    def __init__(self):
        self._contracts: Dict[str, Contract] = {}

    def __contains__(self, contract_id: object) -> bool:
        return contract_id in self._contracts

    def lookup(self, contract_id: str) -> Optional[Contract]:
        return self._contracts.get(contract_id)

    def get(self, contract_id: str) -> Contract:
        contract = self._contracts.get(contract_id)
        if contract is None:
            raise ContractNotFound(contract_id)
        return contract

    def ids(self) -> List[str]:
        return sorted(self._contracts)

    def add(self, contract: Contract) -> None:
        if contract.contract_id in self._contracts:
            raise DuplicateContract(contract.contract_id)
        self._contracts[contract.contract_id] = contract


def register_contract(registry: ContractRegistry, contract: Contract) -> ContractRegistry:
    """註冊合約並回傳註冊表"""
    registry.add(contract)
    return registry


def step_linreg(points: Sequence[Point]) -> Tuple[float, float]:
    """
    普通最小平方法線性回歸

    Args:
        points: (x, y) 點列

    Returns:
        (斜率, 截距)
    """
    if len(points) < 2:
        raise DegenerateInput(f"至少需要 2 個點，目前 {len(points)} 個")
    data = np.asarray(points, dtype=float)
    x, y = data[:, 0], data[:, 1]
    if np.all(x == x[0]):
        raise DegenerateInput("所有 x 相同")

    dx = x - x.mean()
    slope = float(np.dot(dx, y - y.mean()) / np.dot(dx, dx))
    intercept = float(y.mean() - slope * x.mean())
    return slope, intercept


def step_scale(points: Sequence[Point], factor: float) -> List[Point]:
    """每個 y 乘上 factor"""
    return [(x, y * factor) for x, y in points]


def step_store(data: bytes, resources: ResourceStore) -> Digest:
    """將資料集寫入資源存放並回傳摘要"""
    return resources.put(data)


def run_workflow(workflow: WorkflowDescription, context: ExecutionContext,
                 start_time: int) -> ContractResult:
    """
    依序執行工作流程步驟

    Args:
        workflow: 工作流程描述
        context: 執行環境
        start_time: 第一個步驟的邏輯時間

    Returns:
        合約結果
    """
    workflow.validate()
    workspace: Dict[str, bytes] = {}
    state: Dict[str, str] = {}
    trace: List[StepEvent] = []
    outputs: Dict[str, Digest] = {}

    for index, step in enumerate(workflow.steps):
        source = step.input_name
        data = workspace.get(source)
        if data is None:
            data = context.datasets.get_bytes(source)
        if data is None:
            raise StepFailure(index, f"找不到資料集 {source}")

        try:
            if step.op == 'linreg':
                slope, intercept = step_linreg(decode_dataset(data))
                result = encode_dataset([(slope, intercept)])
                state[f"linreg.{step.output_name}.slope"] = render_real(slope)
                state[f"linreg.{step.output_name}.intercept"] = render_real(intercept)
            elif step.op == 'scale':
                result = encode_dataset(step_scale(decode_dataset(data),
                                                   float(step.params['factor'])))
            else:
                result = data
                digest = step_store(data, context.resources)
                state[f"store.{step.output_name}.uri"] = ResourceStore.uri_for(digest)
        except DegenerateInput as e:
            raise StepFailure(index, str(e)) from e
        except (ValueError, UnicodeDecodeError) as e:
            raise StepFailure(index, f"資料集格式錯誤: {e}") from e

        workspace[step.output_name] = result
        out_digest = compute_digest(result)
        outputs[step.output_name] = out_digest
        state[f"out.{step.output_name}"] = out_digest.hex()
        trace.append(StepEvent(
            step_index=index,
            op=step.op,
            input_digests={source: compute_digest(data)},
            output_digests={step.output_name: out_digest},
            logical_time=start_time + index,
            params=dict(step.params),
        ))

    return ContractResult(state, tuple(trace), outputs)


def _workflow_handler(tx: Transaction, context: ExecutionContext) -> ContractResult:
    text = tx.state.get(WORKFLOW_KEY)
    if text is None:
        raise MalformedWorkflow(f"狀態缺少 {WORKFLOW_KEY!r}")
    return run_workflow(WorkflowDescription.parse(text), context, tx.logical_time)


def _workflow_precondition(state: Mapping[str, str]) -> bool:
    try:
        WorkflowDescription.parse(state[WORKFLOW_KEY])
        return True
    except (KeyError, MalformedWorkflow):
        return False


def _staging_handler(tx: Transaction, context: ExecutionContext) -> ContractResult:
    state = {}
    outputs = {}
    for name in tx.state['datasets'].split(','):
        data = context.datasets.get_bytes(name)
        if data is None:
            raise StepFailure(0, f"找不到資料集 {name}")
        digest = step_store(data, context.resources)
        outputs[name] = digest
        state[f"staged.{name}"] = digest.hex()
    return ContractResult(state, (), outputs)


def _staging_precondition(state: Mapping[str, str]) -> bool:
    return bool(state.get('datasets', '').strip())


def default_contract_registry() -> ContractRegistry:
    """建立含內建合約的註冊表，所有節點相同"""
    registry = ContractRegistry()
    register_contract(registry, Contract(
        WORKFLOW_CONTRACT_ID,
        '執行狀態中 workflow 描述的科學工作流程',
        _workflow_handler,
        _workflow_precondition,
    ))
    register_contract(registry, Contract(
        STAGING_CONTRACT_ID,
        '將資料集暫存到資源存放並記錄摘要',
        _staging_handler,
        _staging_precondition,
    ))
    return registry


def execute_contract(contract_id: str, tx: Transaction, datasets: DatasetStore,
                     resources: Optional[ResourceStore] = None,
                     registry: Optional[ContractRegistry] = None) -> ContractResult:
    """
    執行交易指定的合約

    Args:
        contract_id: 合約ID
        tx: 交易
        datasets: 具名資料集存放
        resources: 資源存放，預設為記憶體存放
        registry: 合約註冊表，預設為內建註冊表

    Returns:
        合約結果
    """
    registry = registry or default_contract_registry()
    contract = registry.get(contract_id)
    context = ExecutionContext(datasets, resources if resources is not None else ResourceStore())
    result = contract.handler(tx, context)

    collisions = [key for key in result.state_entries if key.startswith(RESERVED_PREFIX)]
    if collisions:
        raise MalformedWorkflow(f"合約輸出使用保留鍵: {collisions}")
    logger.debug(f"合約 {contract_id} 執行完成，{len(result.execution_trace)} 個步驟")
    return result
