"""
私有頻道與帳本查詢模組

私有交易只在公開帳本記錄存在性，完整狀態保存在頻道成員的側存放。
"""
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple, Union

from .canonical import Digest, canonical_dumps, compute_digest
from .ledger import Chain, Transaction
from .membership import MembershipRegistry
from .network import ConsensusResult, SimNetwork, propose_transaction
from .provenance import PARENT_KEY
from ..utils.errors import (
    ChannelAccessDenied,
    CyclicLineage,
    TooFewMembers,
    UnknownMember,
    UnknownTransaction,
)
from ..utils.logger import setup_logger

logger = setup_logger('access')

StateLookup = Callable[[Transaction], Mapping[str, str]]


@dataclass(frozen=True)
class Channel:
    """私有頻道"""
    channel_id: str
    members: FrozenSet[str]
    created: int
    label: str = ''

    def __post_init__(self):
        if len(self.members) < 2:
            raise TooFewMembers(f"頻道至少需要 2 位成員，目前 {len(self.members)} 位")

    @staticmethod
    def compute_id(members: Iterable[str], created: int) -> str:
        return compute_digest(canonical_dumps({'created': created,
                                               'members': sorted(members)})).hex()


def create_channel(members: Iterable[str], registry: MembershipRegistry, created: int = 0,
                   label: str = '', network: Optional[SimNetwork] = None) -> Channel:
    """
    建立私有頻道

    Args:
        members: 成員ID
        registry: 成員登錄表
        created: 建立的邏輯時間
        label: 腳本用的頻道標籤
        network: 若提供，在每個成員節點初始化頻道側存放

    Returns:
        頻道
    """
    members = frozenset(members)
    for member_id in sorted(members):
        if member_id not in registry:
            raise UnknownMember(member_id)
    if len(members) < 2:
        raise TooFewMembers(f"頻道至少需要 2 位成員，目前 {len(members)} 位")

    channel = Channel(Channel.compute_id(members, created), members, created, label)
    if network is not None:
        for node in network.peers:
            node.channels[channel.channel_id] = channel
            if node.member_id in members:
                node.side_stores.setdefault(channel.channel_id, {})
        network.record('channel', channel=channel.channel_id, members=len(members))
    logger.debug(f"建立頻道 {label or channel.channel_id[:12]}，{len(members)} 位成員")
    return channel


def submit_private(channel: Channel, tx: Transaction, network: SimNetwork) -> ConsensusResult:
    """
    提交私有交易

    公開交易的狀態為空並只對公開欄位簽章；完整狀態只送給頻道成員。

    Args:
        channel: 頻道
        tx: 帶完整狀態的交易（不需簽章）
        network: 模擬網路

    Returns:
        以頻道成員多數決定的共識結果
    """
    if tx.initiator not in channel.members or tx.responder not in channel.members:
        raise ChannelAccessDenied("交易雙方必須都是頻道成員")
    if tx.channel_id != channel.channel_id:
        raise ChannelAccessDenied(f"交易頻道 {tx.channel_id} 與 {channel.channel_id} 不符")

    node = network.peer(tx.initiator)
    public = tx.with_state({}).signed(node.signer)
    return propose_transaction(network, tx.initiator, public,
                               private_state=dict(tx.state), electorate=channel.members)


def get_transaction(chain: Chain, tx_id: Union[str, Digest]) -> Optional[Transaction]:
    """以交易ID查詢，公開與私有交易相同"""
    return chain.find(tx_id)


class Direction(str, Enum):
    FORWARD = 'forward'
    BACKWARD = 'backward'


@dataclass(frozen=True)
class Query:
    """交易查詢條件，所有條件以 AND 結合"""
    initiator: Optional[str] = None
    responder: Optional[str] = None
    contract_id: Optional[str] = None
    in_channel: Optional[bool] = None
    has_key: Optional[str] = None
    asset_id: Optional[str] = None
    time_min: Optional[int] = None
    time_max: Optional[int] = None

    def matches(self, tx: Transaction) -> bool:
        if self.initiator is not None and tx.initiator != self.initiator:
            return False
        if self.responder is not None and tx.responder != self.responder:
            return False
        if self.contract_id is not None and tx.contract_id != self.contract_id:
            return False
        if self.in_channel is not None and (tx.channel_id is not None) != self.in_channel:
            return False
        if self.has_key is not None and self.has_key not in tx.state:
            return False
        if self.asset_id is not None and tx.asset_id != self.asset_id:
            return False
        if self.time_min is not None and tx.logical_time < self.time_min:
            return False
        if self.time_max is not None and tx.logical_time > self.time_max:
            return False
        return True


_TERM = re.compile(r'^(contract|from|to|channel|has|asset|time)(>=|<=|=|>|<)(.+)$')


def parse_query(expression: str,
                resolve_name: Optional[Callable[[str], Optional[str]]] = None) -> Query:
    """
    解析查詢表達式，例如 `contract=workflow_execution from=alice time>=10`

    Args:
        expression: 以空白分隔的條件
        resolve_name: 將顯示名稱轉成成員ID的函式

    Returns:
        查詢條件
    """
    fields: Dict[str, object] = {}
    for term in expression.split():
        match = _TERM.match(term)
        if match is None:
            raise ValueError(f"無法解析查詢條件 {term!r}")
        key, op, value = match.groups()
        if key != 'time' and op != '=':
            raise ValueError(f"{key} 只支援 '='")

        if key in ('from', 'to'):
            member_id = resolve_name(value) if resolve_name else None
            fields['initiator' if key == 'from' else 'responder'] = member_id or value
        elif key == 'contract':
            fields['contract_id'] = value
        elif key == 'channel':
            if value not in ('yes', 'no'):
                raise ValueError(f"channel 只接受 yes/no: {value!r}")
            fields['in_channel'] = value == 'yes'
        elif key == 'has':
            fields['has_key'] = value
        elif key == 'asset':
            fields['asset_id'] = value
        else:
            moment = int(value)
            if op in ('>=', '='):
                fields['time_min'] = max(moment, fields.get('time_min', moment))
            if op in ('<=', '='):
                fields['time_max'] = min(moment, fields.get('time_max', moment))
            if op == '>':
                fields['time_min'] = max(moment + 1, fields.get('time_min', moment + 1))
            if op == '<':
                fields['time_max'] = min(moment - 1, fields.get('time_max', moment - 1))
    return Query(**fields)


def walk(chain: Chain, direction: Union[Direction, str] = Direction.FORWARD,
         query: Optional[Query] = None) -> List[Transaction]:
    """
    依時間順序走訪符合條件的交易

    Args:
        chain: 雜湊鏈
        direction: forward 依 (logical_time, tx_id) 遞增，backward 遞減
        query: 查詢條件，None 表示全部

    Returns:
        交易列表
    """
    query = query or Query()
    matched = sorted((tx for tx in chain.transactions() if query.matches(tx)),
                     key=lambda tx: tx.sort_key)
    if Direction(direction) is Direction.BACKWARD:
        matched.reverse()
    return matched


@dataclass(frozen=True)
class Lineage:
    """由子交易到最早祖先的衍生鏈"""
    tx_ids: Tuple[str, ...] = ()
    unresolved: Optional[str] = None

    def __len__(self) -> int:
        return len(self.tx_ids)

    @property
    def complete(self) -> bool:
        return self.unresolved is None


def _state_of(tx: Transaction, state_lookup: Optional[StateLookup]) -> Mapping[str, str]:
    if state_lookup is not None:
        return state_lookup(tx)
    return tx.state


def trace_lineage(chain: Chain, tx_id: Union[str, Digest],
                  state_lookup: Optional[StateLookup] = None) -> Lineage:
    """
    沿 parent.txid 追溯祖先

    懸空的父交易ID不視為錯誤，記錄在 unresolved。

    Args:
        chain: 雜湊鏈
        tx_id: 起始交易
        state_lookup: 取得交易完整狀態的函式（私有交易用側存放）

    Returns:
        祖先交易ID，子到祖先順序
    """
    tx = chain.find(tx_id)
    if tx is None:
        raise UnknownTransaction(str(tx_id))

    ancestors: List[str] = []
    visited: Set[str] = {tx.tx_hex}
    while True:
        parent_id = _state_of(tx, state_lookup).get(PARENT_KEY)
        if parent_id is None:
            return Lineage(tuple(ancestors))
        if parent_id in visited:
            raise CyclicLineage(f"衍生鏈在 {parent_id[:12]} 形成循環")
        parent = chain.find(parent_id)
        if parent is None:
            logger.warning(f"父交易 {parent_id[:12]} 不在帳本中")
            return Lineage(tuple(ancestors), unresolved=parent_id)
        ancestors.append(parent_id)
        visited.add(parent_id)
        tx = parent


def trace_descendants(chain: Chain, tx_id: Union[str, Digest],
                      state_lookup: Optional[StateLookup] = None) -> List[str]:
    """
    時間正向找出所有衍生自指定交易的後代

    Returns:
        後代交易ID，依 (logical_time, tx_id) 遞增
    """
    root = chain.find(tx_id)
    if root is None:
        raise UnknownTransaction(str(tx_id))

    children: Dict[str, List[Transaction]] = {}
    for tx in chain.transactions():
        parent_id = _state_of(tx, state_lookup).get(PARENT_KEY)
        if parent_id is not None:
            children.setdefault(parent_id, []).append(tx)

    found: Dict[str, Transaction] = {}
    frontier = [root.tx_hex]
    while frontier:
        current = frontier.pop()
        for child in children.get(current, []):
            if child.tx_hex not in found and child.tx_hex != root.tx_hex:
                found[child.tx_hex] = child
                frontier.append(child.tx_hex)
    return [tx.tx_hex for tx in sorted(found.values(), key=lambda tx: tx.sort_key)]


def find_asset(chain: Chain, asset_id: str) -> List[Transaction]:
    """找出建立指定資產的交易，依時間遞增"""
    return walk(chain, Direction.FORWARD, Query(asset_id=asset_id))


@dataclass
class SideStoreView:
    """合併多個頻道側存放的唯讀檢視"""
    stores: Mapping[str, Mapping[str, Mapping[str, str]]] = field(default_factory=dict)

    def __call__(self, tx: Transaction) -> Mapping[str, str]:
        if tx.channel_id is not None:
            entry = self.stores.get(tx.channel_id, {}).get(tx.tx_hex)
            if entry is not None:
                return entry
        return tx.state
