"""
溯源紀錄模組

兩種表示法：
- 樹狀溯源：以最終產生的實體為根，邊沿時間反向指向使用/產生的節點
- 事件溯源：依時間正向記錄每個步驟的輸入與輸出

兩種擷取方式：嵌入完整紀錄，或只記錄標準名稱與指向資源的摘要引用。
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx

from .canonical import Digest, canonical_dumps, canonical_loads, compute_digest
from .contracts import (
    WORKFLOW_KEY,
    ContractResult,
    Step,
    StepEvent,
    WorkflowDescription,
)
from .ledger import Chain, Transaction
from .storage import ResourceStore
from ..utils.errors import (
    DigestMismatch,
    EmptyTrace,
    InconsistentTrace,
    IrrecoverableRecord,
    MalformedWorkflow,
    NoProvenance,
    ReservedKeyCollision,
    SerializationError,
    UnknownParent,
    UnresolvableReference,
)
from ..utils.logger import setup_logger

PROV_PREFIX = 'prov.'
KEY_EMBEDDED = 'prov.embedded'
KEY_STANDARD = 'prov.standard'
KEY_REF_URI = 'prov.ref.uri'
KEY_REF_DIGEST = 'prov.ref.digest'
PARENT_KEY = 'parent.txid'

STANDARD_TREE = 'PROV-DM-SUBSET'
STANDARD_EVENTS = 'EVENT-LOG-V1'

logger = setup_logger('provenance')


class EntityKind(str, Enum):
    DATASET = 'dataset'
    FILE = 'file'
    ASSET = 'asset'


class EdgeKind(str, Enum):
    USED = 'used'
    GENERATED_BY = 'generatedBy'
    STORED_IN = 'storedIn'


class CaptureMode(str, Enum):
    """擷取方式"""
    EMBEDDED = 'Embedded'
    REFERENCE = 'Reference'
    BOTH = 'Both'

    @property
    def embeds(self) -> bool:
        return self in (CaptureMode.EMBEDDED, CaptureMode.BOTH)

    @property
    def references(self) -> bool:
        return self in (CaptureMode.REFERENCE, CaptureMode.BOTH)


class Representation(str, Enum):
    """溯源表示法"""
    TREE = 'tree'
    EVENTS = 'events'

    @property
    def standard(self) -> str:
        return STANDARD_TREE if self is Representation.TREE else STANDARD_EVENTS


def step_node_id(step_index: int, op: str) -> str:
    return f"step{step_index:02d}.{op}"


@dataclass(frozen=True)
class ProvEntity:
    """溯源實體"""
    entity_id: str
    kind: EntityKind
    digest: Optional[Digest] = None
    location: Optional[str] = None
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash((self.entity_id, self.kind, self.digest))

    def to_dict(self) -> dict:
        data = {'attributes': dict(self.attributes), 'entity_id': self.entity_id,
                'kind': self.kind.value}
        if self.digest is not None:
            data['digest'] = self.digest
        if self.location is not None:
            data['location'] = self.location
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ProvEntity':
        return cls(
            entity_id=data['entity_id'],
            kind=EntityKind(data['kind']),
            digest=Digest.from_hex(data['digest']) if 'digest' in data else None,
            location=data.get('location'),
            attributes=dict(data['attributes']),
        )


@dataclass(frozen=True)
class ProvActivity:
    """溯源活動"""
    activity_id: str
    op: str
    started: int
    ended: int
    params: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.started > self.ended:
            raise ValueError(f"活動 {self.activity_id} 開始晚於結束")

    def __hash__(self) -> int:
        return hash((self.activity_id, self.op, self.started, self.ended))

    def to_dict(self) -> dict:
        return {'activity_id': self.activity_id, 'ended': self.ended, 'op': self.op,
                'params': dict(self.params), 'started': self.started}

    @classmethod
    def from_dict(cls, data: dict) -> 'ProvActivity':
        return cls(data['activity_id'], data['op'], data['started'], data['ended'],
                   dict(data['params']))


@dataclass(frozen=True)
class ProvEdge:
    """溯源邊；storedIn 邊記錄對應的 store 步驟"""
    kind: EdgeKind
    source: str
    target: str
    activity: Optional[str] = None
    time: Optional[int] = None

    def to_dict(self) -> dict:
        data = {'from': self.source, 'kind': self.kind.value, 'to': self.target}
        if self.activity is not None:
            data['activity'] = self.activity
        if self.time is not None:
            data['time'] = self.time
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ProvEdge':
        return cls(EdgeKind(data['kind']), data['from'], data['to'],
                   data.get('activity'), data.get('time'))


@dataclass(frozen=True)
class ProvTree:
    """以最終實體為根的溯源樹"""
    root: str
    entities: Tuple[ProvEntity, ...]
    activities: Tuple[ProvActivity, ...]
    edges: Tuple[ProvEdge, ...]

    def graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        for entity in self.entities:
            graph.add_node(entity.entity_id, node_type='entity')
        for activity in self.activities:
            graph.add_node(activity.activity_id, node_type='activity')
        for edge in self.edges:
            graph.add_edge(edge.source, edge.target, kind=edge.kind.value)
        return graph

    @property
    def node_count(self) -> int:
        return len(self.entities) + len(self.activities)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def entity(self, entity_id: str) -> Optional[ProvEntity]:
        for entity in self.entities:
            if entity.entity_id == entity_id:
                return entity
        return None

    def validate(self) -> None:
        """根是實體、圖無環、所有節點都可由根到達"""
        ids = [e.entity_id for e in self.entities] + [a.activity_id for a in self.activities]
        if len(ids) != len(set(ids)):
            raise InconsistentTrace("節點ID重複")
        if self.entity(self.root) is None:
            raise InconsistentTrace(f"根 {self.root} 不是實體")
        graph = self.graph()
        if not nx.is_directed_acyclic_graph(graph):
            raise InconsistentTrace("溯源圖有環")
        unreachable = set(graph.nodes) - nx.descendants(graph, self.root) - {self.root}
        if unreachable:
            raise InconsistentTrace(f"節點無法由根到達: {sorted(unreachable)}")

    def step_nodes(self) -> List[Tuple[str, str, int]]:
        """所有步驟（活動與 store 邊）的 (ID, 操作, 時間)"""
        nodes = [(a.activity_id, a.op, a.ended) for a in self.activities]
        nodes.extend((e.activity, 'store', e.time) for e in self.edges
                     if e.kind is EdgeKind.STORED_IN and e.activity is not None)
        return nodes

    def activity_ops(self) -> List[str]:
        return sorted(op for _, op, _ in self.step_nodes())

    def walk_backward(self) -> List[str]:
        """由根往回走，依時間遞減列出步驟ID"""
        nodes = sorted(self.step_nodes(), key=lambda n: (n[2], n[0]), reverse=True)
        return [node_id for node_id, _, _ in nodes]

    def to_dict(self) -> dict:
        return {
            'activities': [a.to_dict() for a in self.activities],
            'edges': [e.to_dict() for e in self.edges],
            'entities': [e.to_dict() for e in self.entities],
            'root': self.root,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ProvTree':
        return cls(
            root=data['root'],
            entities=tuple(ProvEntity.from_dict(e) for e in data['entities']),
            activities=tuple(ProvActivity.from_dict(a) for a in data['activities']),
            edges=tuple(ProvEdge.from_dict(e) for e in data['edges']),
        )


@dataclass(frozen=True)
class EventLogRecord:
    """時間正向的事件溯源紀錄"""
    events: Tuple[StepEvent, ...]
    inputs: Mapping[str, Digest]
    outputs: Mapping[str, Digest]
    workflow: Optional[WorkflowDescription] = None

    def __post_init__(self):
        times = [event.logical_time for event in self.events]
        if any(a >= b for a, b in zip(times, times[1:])):
            raise ValueError("事件時間必須嚴格遞增")

    def __hash__(self) -> int:
        return hash(self.events)

    def walk_forward(self) -> List[str]:
        return [step_node_id(e.step_index, e.op) for e in self.events]

    def ops(self) -> List[str]:
        return sorted(event.op for event in self.events)

    def to_dict(self) -> dict:
        data = {
            'events': [event.to_dict() for event in self.events],
            'inputs': dict(self.inputs),
            'outputs': dict(self.outputs),
        }
        if self.workflow is not None:
            data['workflow'] = self.workflow.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'EventLogRecord':
        return cls(
            events=tuple(StepEvent.from_dict(e) for e in data['events']),
            inputs={k: Digest.from_hex(v) for k, v in data['inputs'].items()},
            outputs={k: Digest.from_hex(v) for k, v in data['outputs'].items()},
            workflow=WorkflowDescription.from_dict(data['workflow']) if 'workflow' in data else None,
        )


@dataclass(frozen=True)
class EmbeddedProvenance:
    """嵌入的溯源內容（樹、事件或兩者）"""
    tree: Optional[ProvTree] = None
    events: Optional[EventLogRecord] = None

    def to_dict(self) -> dict:
        data = {}
        if self.tree is not None:
            data['tree'] = self.tree.to_dict()
        if self.events is not None:
            data['events'] = self.events.to_dict()
        return data

    def canonical_bytes(self) -> bytes:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> 'EmbeddedProvenance':
        return cls(
            tree=ProvTree.from_dict(data['tree']) if 'tree' in data else None,
            events=EventLogRecord.from_dict(data['events']) if 'events' in data else None,
        )

    @classmethod
    def parse(cls, body: Union[bytes, str]) -> 'EmbeddedProvenance':
        try:
            return cls.from_dict(canonical_loads(body))
        except (SerializationError, MalformedWorkflow, KeyError, TypeError, ValueError) as e:
            raise IrrecoverableRecord(f"無法解析溯源內容: {e}") from e


@dataclass(frozen=True)
class ProvenanceReference:
    """溯源標準描述與資源指標"""
    standard: str
    uri: str
    digest: Digest


@dataclass(frozen=True)
class ProvenanceRecord:
    """
    溯源紀錄

    resolved 為引用資源解析後的內容；標準未知時改存 opaque 原始位元組。
    """
    mode: CaptureMode
    embedded: Optional[EmbeddedProvenance] = None
    reference: Optional[ProvenanceReference] = None
    resolved: Optional[EmbeddedProvenance] = None
    opaque: Optional[bytes] = None

    def __post_init__(self):
        if self.mode.embeds and self.embedded is None:
            raise ValueError(f"{self.mode.value} 模式需要嵌入內容")
        if self.mode.references and self.reference is None:
            raise ValueError(f"{self.mode.value} 模式需要資源引用")

    @property
    def content(self) -> Optional[EmbeddedProvenance]:
        return self.embedded if self.embedded is not None else self.resolved


def _check_trace(trace: Sequence[StepEvent], workflow: WorkflowDescription) -> None:
    if len(trace) != len(workflow.steps):
        raise InconsistentTrace(f"軌跡 {len(trace)} 步，工作流程 {len(workflow.steps)} 步")
    for event, step in zip(trace, workflow.steps):
        if (event.op != step.op or set(event.input_digests) != {step.input_name}
                or set(event.output_digests) != {step.output_name}):
            raise InconsistentTrace(f"步驟 {event.step_index} 與工作流程不符")


def build_tree_record(trace: Sequence[StepEvent], workflow: WorkflowDescription,
                      attributes: Optional[Mapping[str, str]] = None) -> ProvTree:
    """
    由執行軌跡建立樹狀溯源

    Args:
        trace: 步驟事件
        workflow: 工作流程描述
        attributes: 附加在根實體上的資訊屬性（例如牆鐘時間）

    Returns:
        以最終實體為根的溯源樹
    """
    if not trace:
        raise InconsistentTrace("軌跡為空")
    _check_trace(trace, workflow)

    root = workflow.final_name
    digests: Dict[str, Digest] = {}
    files = set()
    for event, step in zip(trace, workflow.steps):
        digests.update(event.input_digests)
        digests.update(event.output_digests)
        if step.op == 'store':
            files.add(step.output_name)

    activities = []
    edges = []
    for event, step in zip(trace, workflow.steps):
        node_id = step_node_id(event.step_index, step.op)
        if step.op == 'store':
            edges.append(ProvEdge(EdgeKind.STORED_IN, step.input_name, step.output_name,
                                  activity=node_id, time=event.logical_time))
            continue
        activities.append(ProvActivity(node_id, step.op, event.logical_time,
                                       event.logical_time, dict(step.params)))
        edges.append(ProvEdge(EdgeKind.GENERATED_BY, step.output_name, node_id))
        edges.append(ProvEdge(EdgeKind.USED, node_id, step.input_name))

    entities = []
    for name in sorted(digests):
        if name == root:
            kind = EntityKind.ASSET
        elif name in files:
            kind = EntityKind.FILE
        else:
            kind = EntityKind.DATASET
        entities.append(ProvEntity(
            entity_id=name,
            kind=kind,
            digest=digests[name],
            location=ResourceStore.uri_for(digests[name]) if kind is EntityKind.FILE else None,
            attributes=dict(attributes or {}) if name == root else {},
        ))

    tree = ProvTree(root, tuple(entities), tuple(activities), tuple(edges))
    tree.validate()
    return tree


def build_event_record(trace: Sequence[StepEvent], workflow: WorkflowDescription,
                       embed_workflow: bool = True) -> EventLogRecord:
    """
    由執行軌跡建立事件溯源

    Args:
        trace: 步驟事件
        workflow: 工作流程描述
        embed_workflow: 是否嵌入完整工作流程描述

    Returns:
        事件溯源紀錄
    """
    if not trace:
        raise EmptyTrace("軌跡為空")

    produced = set()
    inputs: Dict[str, Digest] = {}
    outputs: Dict[str, Digest] = {}
    for event in trace:
        for name, digest in event.input_digests.items():
            if name not in produced:
                inputs.setdefault(name, digest)
        for name, digest in event.output_digests.items():
            produced.add(name)
            outputs[name] = digest

    return EventLogRecord(
        events=tuple(trace),
        inputs=inputs,
        outputs=outputs,
        workflow=workflow if embed_workflow else None,
    )


def attach_provenance(tx: Transaction, record: ProvenanceRecord) -> Dict[str, str]:
    """
    將溯源紀錄寫入交易狀態

    Returns:
        更新後的狀態
    """
    collisions = [key for key in tx.state if key.startswith(PROV_PREFIX)]
    if collisions:
        raise ReservedKeyCollision(f"狀態已有保留鍵: {collisions}")

    state = dict(tx.state)
    if record.mode.embeds:
        state[KEY_EMBEDDED] = record.embedded.canonical_bytes().decode('utf-8')
    if record.mode.references:
        state[KEY_STANDARD] = record.reference.standard
        state[KEY_REF_URI] = record.reference.uri
        state[KEY_REF_DIGEST] = record.reference.digest.hex()
    return state


def _read_reference(state: Mapping[str, str]) -> ProvenanceReference:
    try:
        uri = state[KEY_REF_URI]
        ResourceStore.key_from_uri(uri)
        return ProvenanceReference(
            standard=state[KEY_STANDARD],
            uri=uri,
            digest=Digest.from_hex(state[KEY_REF_DIGEST]),
        )
    except (KeyError, ValueError) as e:
        raise UnresolvableReference(f"引用欄位不完整: {e}") from e


def extract_record(tx: Transaction, resources: ResourceStore,
                   state: Optional[Mapping[str, str]] = None) -> ProvenanceRecord:
    """
    從交易狀態取出溯源紀錄

    Args:
        tx: 交易
        resources: 引用資源存放
        state: 覆蓋用的狀態（私有交易取自頻道側存放）

    Returns:
        溯源紀錄
    """
    state = tx.state if state is None else state
    if not any(key.startswith(PROV_PREFIX) for key in state):
        raise NoProvenance(f"交易 {tx.tx_hex[:12]} 沒有溯源資料")

    embedded = None
    if KEY_EMBEDDED in state:
        embedded = EmbeddedProvenance.parse(state[KEY_EMBEDDED])

    if KEY_REF_URI not in state and KEY_STANDARD not in state:
        return ProvenanceRecord(CaptureMode.EMBEDDED, embedded=embedded)

    reference = _read_reference(state)
    body = resources.get(reference.uri)
    if embedded is not None:
        if compute_digest(embedded.canonical_bytes()) != reference.digest:
            raise DigestMismatch("嵌入內容與引用摘要不符")
        if body is None:
            logger.warning(f"找不到資源 {reference.uri}，改用嵌入內容")
        elif compute_digest(body) != reference.digest:
            raise DigestMismatch(f"資源 {reference.uri} 已被修改")
        return ProvenanceRecord(CaptureMode.BOTH, embedded=embedded, reference=reference)

    if body is None:
        raise UnresolvableReference(f"找不到資源 {reference.uri}")
    if compute_digest(body) != reference.digest:
        raise DigestMismatch(f"資源 {reference.uri} 已被修改")

    if reference.standard in (STANDARD_TREE, STANDARD_EVENTS):
        return ProvenanceRecord(CaptureMode.REFERENCE, reference=reference,
                                resolved=EmbeddedProvenance.parse(body))
    logger.info(f"未知的溯源標準 {reference.standard}，保留原始內容")
    return ProvenanceRecord(CaptureMode.REFERENCE, reference=reference, opaque=body)


def _workflow_from_events(events: EventLogRecord) -> WorkflowDescription:
    steps = []
    for event in events.events:
        (source,) = event.input_digests
        (target,) = event.output_digests
        steps.append(Step.simple(event.op, source, target, **event.params))
    return WorkflowDescription(tuple(steps))


def _workflow_from_tree(tree: ProvTree) -> WorkflowDescription:
    info: Dict[str, Tuple[str, str, str, Mapping[str, str]]] = {}
    for activity in tree.activities:
        used = [e.target for e in tree.edges
                if e.kind is EdgeKind.USED and e.source == activity.activity_id]
        generated = [e.source for e in tree.edges
                     if e.kind is EdgeKind.GENERATED_BY and e.target == activity.activity_id]
        if len(used) != 1 or len(generated) != 1:
            raise IrrecoverableRecord(f"活動 {activity.activity_id} 的邊不完整")
        info[activity.activity_id] = (activity.op, used[0], generated[0], activity.params)
    for edge in tree.edges:
        if edge.kind is EdgeKind.STORED_IN:
            if edge.activity is None:
                raise IrrecoverableRecord(f"storedIn 邊 {edge.source}->{edge.target} 缺少步驟ID")
            info[edge.activity] = ('store', edge.source, edge.target, {})

    # 依資料相依建立正向步驟圖，同層以步驟ID排序
    producers = {output: node_id for node_id, (_, _, output, _) in info.items()}
    graph = nx.DiGraph()
    graph.add_nodes_from(info)
    for node_id, (_, source, _, _) in info.items():
        if source in producers:
            graph.add_edge(producers[source], node_id)
    if not nx.is_directed_acyclic_graph(graph):
        raise IrrecoverableRecord("步驟相依有環")

    order = nx.lexicographical_topological_sort(graph, key=lambda n: n)
    steps = []
    for node_id in order:
        op, source, target, params = info[node_id]
        steps.append(Step.simple(op, source, target, **params))
    return WorkflowDescription(tuple(steps))


def reconstruct_workflow(record: ProvenanceRecord) -> WorkflowDescription:
    """
    由溯源紀錄重建工作流程

    優先順序：嵌入的工作流程描述、事件紀錄、溯源樹。

    Returns:
        可重新執行的工作流程描述
    """
    content = record.content
    if content is None:
        raise IrrecoverableRecord("溯源紀錄沒有可解析的內容")

    try:
        if content.events is not None:
            if content.events.workflow is not None:
                return content.events.workflow
            workflow = _workflow_from_events(content.events)
        elif content.tree is not None:
            workflow = _workflow_from_tree(content.tree)
        else:
            raise IrrecoverableRecord("溯源紀錄沒有樹或事件")
        workflow.validate()
        return workflow
    except (MalformedWorkflow, ValueError) as e:
        raise IrrecoverableRecord(f"無法重建工作流程: {e}") from e


def capture_provenance(tx: Transaction, result: ContractResult, workflow: WorkflowDescription,
                       mode: CaptureMode, representation: Representation,
                       resources: ResourceStore) -> Transaction:
    """
    將合約結果與溯源紀錄寫入交易狀態

    Args:
        tx: 未簽章的交易
        result: 合約執行結果
        workflow: 已執行的工作流程
        mode: 擷取方式
        representation: 溯源表示法
        resources: 引用資源存放

    Returns:
        狀態已更新、尚未簽章的交易
    """
    attributes = {'wall_time': tx.wall_time} if tx.wall_time else {}
    if representation is Representation.TREE:
        payload = EmbeddedProvenance(tree=build_tree_record(result.execution_trace, workflow,
                                                            attributes))
    else:
        payload = EmbeddedProvenance(events=build_event_record(result.execution_trace, workflow))

    reference = None
    if mode.references:
        digest = resources.put(payload.canonical_bytes())
        reference = ProvenanceReference(representation.standard,
                                        ResourceStore.uri_for(digest), digest)

    record = ProvenanceRecord(
        mode=mode,
        embedded=payload if mode.embeds else None,
        reference=reference,
    )
    merged = tx.with_state({**tx.state, **result.state_entries})
    return merged.with_state(attach_provenance(merged, record))


@dataclass(frozen=True)
class WorkflowModification:
    """衍生工作流程的修改內容"""
    dataset_renames: Mapping[str, str] = field(default_factory=dict)
    workflow: Optional[WorkflowDescription] = None
    state: Mapping[str, str] = field(default_factory=dict)


def derive_workflow(chain: Chain, parent: Union[str, Digest, Transaction],
                    modifications: Optional[WorkflowModification] = None, *,
                    logical_time: int, asset_id: Optional[str] = None,
                    initiator: Optional[str] = None, responder: Optional[str] = None,
                    resources: Optional[ResourceStore] = None,
                    parent_state: Optional[Mapping[str, str]] = None) -> Transaction:
    """
    以已提交的交易為父，建立修改過的衍生交易

    新交易狀態以 parent.txid 指向父交易，並照一般共識流程提交。

    Args:
        chain: 父交易所在的雜湊鏈
        parent: 父交易或其ID
        modifications: 修改內容；為None時即複製原工作流程
        logical_time: 新交易的邏輯時間
        asset_id: 新資產名稱，預設沿用父交易
        initiator: 發起者，預設沿用父交易
        responder: 回應者，預設沿用父交易
        resources: 讀取父交易溯源引用用的資源存放
        parent_state: 父交易的完整狀態（私有交易）

    Returns:
        未簽章的衍生交易
    """
    if isinstance(parent, Transaction):
        parent_id = parent.tx_id
    else:
        parent_id = parent
    parent_tx = chain.find(parent_id) if parent_id is not None else None
    if parent_tx is None:
        raise UnknownParent(f"父交易 {parent_id} 不在帳本中")

    modifications = modifications or WorkflowModification()
    state = dict(parent_tx.state if parent_state is None else parent_state)

    if modifications.workflow is not None:
        workflow = modifications.workflow
    elif WORKFLOW_KEY in state:
        workflow = WorkflowDescription.parse(state[WORKFLOW_KEY])
    else:
        record = extract_record(parent_tx, resources or ResourceStore(), state)
        workflow = reconstruct_workflow(record)
    workflow = workflow.substitute(modifications.dataset_renames)
    workflow.validate()

    new_state = dict(modifications.state)
    new_state[WORKFLOW_KEY] = workflow.serialize()
    new_state[PARENT_KEY] = parent_tx.tx_hex

    derived = Transaction(
        initiator=initiator or parent_tx.initiator,
        responder=responder or parent_tx.responder,
        asset_id=asset_id or parent_tx.asset_id,
        contract_id=parent_tx.contract_id,
        logical_time=logical_time,
        state=new_state,
        channel_id=parent_tx.channel_id,
    )
    logger.debug(f"由 {parent_tx.tx_hex[:12]} 衍生新交易 {derived.asset_id}")
    return derived
