"""
背書共識與確定性網路模擬模組

所有節點互動都透過模擬訊息；訊息依 (送達時間, 發送者ID, 序號) 順序送達。
"""
import hashlib
import heapq
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, Iterable, List, Mapping, Optional, Set, Tuple, Union

from .canonical import Digest, canonical_dumps
from .contracts import ContractRegistry, default_contract_registry
from .ledger import Block, Chain, Transaction, seal_block, verify_block
from .membership import (
    JoinRequest,
    MembershipRegistry,
    PeerIdentity,
    Role,
    Signer,
    approve,
    approve_join,
    generate_identity,
    replay_registry,
    verify_with_key,
)
from ..utils.errors import (
    DuplicateEndorser,
    InsufficientApprovals,
    NetworkStalled,
    NotAMember,
    UnknownPeer,
)
from ..utils.logger import setup_logger

if TYPE_CHECKING:
    from .access import Channel

logger = setup_logger('network')


class Verdict(str, Enum):
    ENDORSE = 'Endorse'
    REJECT = 'Reject'


class RejectReason(str, Enum):
    SOURCE_INVALID = 'SourceInvalid'
    PURPOSE_INVALID = 'PurposeInvalid'
    CHANNEL_INVALID = 'ChannelInvalid'


@dataclass(frozen=True)
class Proposal:
    """
    待共識的交易提案

    private_state 只送給頻道成員，公開交易本身的狀態為空。
    """
    transaction: Transaction
    proposer: str
    private_state: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        if self.proposer != self.transaction.initiator:
            raise ValueError("提案者必須是交易發起者")


@dataclass(frozen=True)
class Endorsement:
    """節點對提案的簽章背書"""
    tx_id: Digest
    endorser: str
    verdict: Verdict
    reason: Optional[RejectReason] = None
    signature: bytes = b''

    @staticmethod
    def signing_bytes_for(tx_id: Digest, verdict: Verdict,
                          reason: Optional[RejectReason]) -> bytes:
        data = {'tx_id': tx_id, 'verdict': verdict.value}
        if reason is not None:
            data['reason'] = reason.value
        return canonical_dumps(data)

    def signing_bytes(self) -> bytes:
        return self.signing_bytes_for(self.tx_id, self.verdict, self.reason)

    @classmethod
    def create(cls, signer: Signer, tx_id: Digest, verdict: Verdict,
               reason: Optional[RejectReason] = None) -> 'Endorsement':
        signature = signer.sign(cls.signing_bytes_for(tx_id, verdict, reason))
        return cls(tx_id, signer.member_id, verdict, reason, signature)

    def is_valid(self, registry: MembershipRegistry) -> bool:
        identity = registry.lookup(self.endorser)
        return identity is not None and verify_with_key(
            identity.public_key, self.signing_bytes(), self.signature)

    @property
    def endorses(self) -> bool:
        return self.verdict is Verdict.ENDORSE


@dataclass(frozen=True)
class ConsensusResult:
    """共識結果"""
    tx_id: Optional[Digest]
    accepted: bool
    endorsements: Tuple[Endorsement, ...]
    quorum_size: int
    electorate_size: int
    accepted_time: Optional[int] = None

    @property
    def endorse_count(self) -> int:
        return sum(1 for e in self.endorsements if e.endorses)


def decide(endorsements: Iterable[Endorsement], registry: MembershipRegistry,
           electorate: Optional[Iterable[str]] = None,
           tx_id: Optional[Digest] = None) -> ConsensusResult:
    """
    依嚴格多數規則決定提案是否通過

    Args:
        endorsements: 背書列表（每位背書者一筆）
        registry: 成員登錄表
        electorate: 投票成員，預設為整個登錄表（私有交易為頻道成員）
        tx_id: 提案交易ID，預設取第一筆背書的ID

    Returns:
        共識結果
    """
    endorsements = tuple(endorsements)
    seen: Set[str] = set()
    for endorsement in endorsements:
        if endorsement.endorser in seen:
            raise DuplicateEndorser(endorsement.endorser)
        seen.add(endorsement.endorser)

    voters = set(electorate) if electorate is not None else set(registry.member_ids)
    if tx_id is None and endorsements:
        tx_id = endorsements[0].tx_id

    count = sum(
        1 for e in endorsements
        if e.endorses and e.endorser in voters and e.tx_id == tx_id and e.is_valid(registry)
    )
    threshold = len(voters) // 2 + 1
    return ConsensusResult(
        tx_id=tx_id,
        accepted=count >= threshold,
        endorsements=endorsements,
        quorum_size=threshold,
        electorate_size=len(voters),
    )


class FaultKind(str, Enum):
    DROP = 'drop'
    RESTORE = 'restore'
    SEVER = 'sever'


@dataclass(frozen=True)
class Fault:
    """注入的網路故障"""
    kind: FaultKind
    peer: str
    other: Optional[str] = None


@dataclass
class PeerNode:
    """模擬網路中的一個節點，只透過訊息與其他節點互動"""
    name: str
    identity: PeerIdentity
    signer: Signer
    registry: MembershipRegistry = field(default_factory=MembershipRegistry)
    chain: Chain = field(default_factory=Chain)
    contracts: ContractRegistry = field(default_factory=default_contract_registry)
    pending: Dict[str, Transaction] = field(default_factory=dict)
    accepted: Set[str] = field(default_factory=set)
    channels: Dict[str, 'Channel'] = field(default_factory=dict)
    side_stores: Dict[str, Dict[str, Dict[str, str]]] = field(default_factory=dict)
    live: bool = True

    @property
    def member_id(self) -> str:
        return self.identity.member_id

    def side_state(self, tx_id: str) -> Optional[Dict[str, str]]:
        """在所屬頻道的側存放中查詢私有狀態"""
        for entries in self.side_stores.values():
            if tx_id in entries:
                return dict(entries[tx_id])
        return None


def validate_proposal(peer: PeerNode, proposal: Proposal) -> Endorsement:
    """
    檢查提案的來源、目的與頻道

    拒絕以背書結果回傳，不拋出例外。

    Args:
        peer: 執行檢查的節點
        proposal: 提案

    Returns:
        簽章背書
    """
    tx = proposal.transaction
    tx_id = tx.tx_id if tx.tx_id is not None else tx.compute_tx_id()

    def reject(reason: RejectReason) -> Endorsement:
        logger.debug(f"{peer.name} 拒絕 {tx.tx_hex[:12]}: {reason.value}")
        return Endorsement.create(peer.signer, tx_id, Verdict.REJECT, reason)

    initiator = peer.registry.lookup(tx.initiator)
    if (initiator is None or tx.responder not in peer.registry
            or tx.tx_id != tx.compute_tx_id()
            or not verify_with_key(initiator.public_key, tx.signing_bytes(), tx.signature)):
        return reject(RejectReason.SOURCE_INVALID)

    state = proposal.private_state if tx.channel_id is not None else tx.state
    contract = peer.contracts.lookup(tx.contract_id)
    if contract is None or not contract.precondition(state or {}):
        return reject(RejectReason.PURPOSE_INVALID)

    if tx.channel_id is not None:
        channel = peer.channels.get(tx.channel_id)
        if (channel is None or tx.state or peer.member_id not in channel.members
                or tx.initiator not in channel.members or tx.responder not in channel.members):
            return reject(RejectReason.CHANNEL_INVALID)

    return Endorsement.create(peer.signer, tx_id, Verdict.ENDORSE)


@dataclass(order=True)
class _Event:
    deliver_time: int
    sender_id: str
    seq: int
    kind: str = field(compare=False)
    sender: str = field(compare=False)
    receiver: str = field(compare=False)
    payload: object = field(compare=False)


class SimNetwork:
    """確定性的多節點網路模擬器"""

    def __init__(self, seed: int = 42, max_latency: int = 3, batch_size: int = 4):
        """
        初始化模擬網路

        Args:
            seed: 亂數種子，決定訊息延遲
            max_latency: 訊息延遲上限（邏輯時間單位）
            batch_size: 待封存交易達此數量時自動封存
        """
        self.logger = setup_logger(self.__class__.__name__)
        self.seed = seed
        self.max_latency = max_latency
        self.batch_size = batch_size
        self.rng = random.Random(seed)
        self.clock = 0
        self.peers: List[PeerNode] = []
        self.link_status: Dict[Tuple[str, str], bool] = {}
        self.trace: List[str] = []
        self.results: Dict[str, ConsensusResult] = {}
        self._queue: List[_Event] = []
        self._seq = 0
        self._votes: Dict[str, List[Endorsement]] = {}

    # 節點與連線

    def peer(self, name_or_id: str) -> PeerNode:
        """以名稱或成員ID查詢節點"""
        for node in self.peers:
            if node.name == name_or_id or node.member_id == name_or_id:
                return node
        raise UnknownPeer(name_or_id)

    def has_peer(self, name_or_id: str) -> bool:
        return any(node.name == name_or_id or node.member_id == name_or_id for node in self.peers)

    def live_peers(self) -> List[PeerNode]:
        return [node for node in self.peers if node.live]

    def link_up(self, a: PeerNode, b: PeerNode) -> bool:
        return self.link_status.get((a.name, b.name), True)

    def can_reach(self, a: PeerNode, b: PeerNode) -> bool:
        if a is b:
            return a.live
        return a.live and b.live and self.link_up(a, b)

    def tick(self) -> int:
        """推進並回傳邏輯時鐘"""
        self.clock += 1
        return self.clock

    def advance_to(self, logical_time: int) -> None:
        self.clock = max(self.clock, logical_time)

    def record(self, event: str, **fields) -> None:
        """以正規序列化記錄一筆訊息軌跡"""
        self.trace.append(canonical_dumps({'event': event, 'time': self.clock, **fields})
                          .decode('utf-8'))

    def peer_seed(self, name: str) -> bytes:
        return hashlib.sha256(f"ledgerflow:{self.seed}:{name}".encode('utf-8')).digest()

    def add_peer(self, name: str, role: Union[Role, str]) -> PeerNode:
        """
        以多數核准加入新節點

        核准來自目前存活的成員；空網路由第一個節點自行加入。

        Args:
            name: 節點名稱
            role: 節點角色

        Returns:
            新節點
        """
        if self.has_peer(name):
            raise ValueError(f"節點 {name} 已存在")
        identity, signer = generate_identity(role, self.peer_seed(name), name)
        request = JoinRequest.create(signer)

        approvers = self.live_peers()
        if self.peers and not approvers:
            raise InsufficientApprovals(f"沒有存活的成員可以核准 {name}")
        base = approvers[0].registry if approvers else MembershipRegistry()
        approvals = [approve(node.signer, identity) for node in approvers
                     if node.member_id in base]
        registry = approve_join(base, request, approvals, logical_time=self.tick())

        node = PeerNode(name=name, identity=identity, signer=signer, registry=registry)
        for other in approvers:
            other.registry = registry
        self.peers.append(node)
        if approvers:
            self.resync(node)
        self.record('join', peer=name, role=identity.role.value,
                    approvals=len(approvals), members=len(registry))
        self.logger.info(f"節點 {name} ({identity.role.value}) 加入，共 {len(registry)} 位成員")
        return node

    # 訊息排程

    def send(self, sender: PeerNode, receiver: PeerNode, kind: str, payload: object) -> bool:
        if not self.can_reach(sender, receiver):
            return False
        self._seq += 1
        latency = self.rng.randint(1, self.max_latency)
        heapq.heappush(self._queue, _Event(self.clock + latency, sender.member_id, self._seq,
                                           kind, sender.name, receiver.name, payload))
        return True

    def run_until_idle(self) -> int:
        """送達所有排程中的訊息，回傳送達數量"""
        delivered = 0
        while self._queue:
            event = heapq.heappop(self._queue)
            self.advance_to(event.deliver_time)
            sender, receiver = self.peer(event.sender), self.peer(event.receiver)
            if not self.can_reach(sender, receiver):
                self.record('lost', kind=event.kind, sender=event.sender, receiver=event.receiver)
                continue
            delivered += 1
            self._deliver(event, sender, receiver)
        return delivered

    def _deliver(self, event: _Event, sender: PeerNode, receiver: PeerNode) -> None:
        if event.kind == 'proposal':
            proposal: Proposal = event.payload
            endorsement = validate_proposal(receiver, proposal)
            self.record('endorse', sender=event.sender, receiver=event.receiver,
                        tx=proposal.transaction.tx_hex, verdict=endorsement.verdict.value)
            self.send(receiver, sender, 'endorsement', endorsement)
        elif event.kind == 'endorsement':
            endorsement: Endorsement = event.payload
            self._votes.setdefault(endorsement.tx_id.hex(), []).append(endorsement)
            self.record('vote', sender=event.sender, receiver=event.receiver,
                        tx=endorsement.tx_id.hex(), verdict=endorsement.verdict.value)
        elif event.kind == 'accept':
            proposal: Proposal = event.payload
            self._accept(receiver, proposal)
            self.record('accept', sender=event.sender, receiver=event.receiver,
                        tx=proposal.transaction.tx_hex)
        elif event.kind == 'block':
            block: Block = event.payload
            self.record('block', sender=event.sender, receiver=event.receiver,
                        index=block.index, digest=block.block_digest.hex())
            self._receive_block(receiver, sender, block)

    def _accept(self, node: PeerNode, proposal: Proposal) -> None:
        tx = proposal.transaction
        node.accepted.add(tx.tx_hex)
        if tx.tx_hex not in node.chain:
            node.pending[tx.tx_hex] = tx
        if tx.channel_id is not None and tx.channel_id in node.channels \
                and node.member_id in node.channels[tx.channel_id].members:
            node.side_stores.setdefault(tx.channel_id, {})[tx.tx_hex] = \
                dict(proposal.private_state or {})

    # 共識

    def propose(self, proposal: Proposal, electorate: Optional[Iterable[str]] = None
                ) -> ConsensusResult:
        """
        廣播提案、收集背書並決定結果

        Args:
            proposal: 提案
            electorate: 投票成員，預設為提案者登錄表中的所有成員

        Returns:
            共識結果
        """
        tx = proposal.transaction
        proposer = self.peer(proposal.proposer)
        if not proposer.live:
            raise NetworkStalled(f"提案節點 {proposer.name} 已離線")
        voters = sorted(electorate) if electorate is not None else proposer.registry.member_ids

        self._votes[tx.tx_hex] = []
        self.record('propose', sender=proposer.name, tx=tx.tx_hex, electorate=len(voters))
        for member_id in voters:
            if self.has_peer(member_id):
                self.send(proposer, self.peer(member_id), 'proposal', proposal)
        self.run_until_idle()

        votes = self._votes.pop(tx.tx_hex, [])
        result = decide(votes, proposer.registry, electorate=voters, tx_id=tx.tx_id)
        missing = len(voters) - len(votes)
        if not result.accepted and result.endorse_count + missing >= result.quorum_size:
            self.record('stall', tx=tx.tx_hex, endorse=result.endorse_count, missing=missing)
            raise NetworkStalled(
                f"交易 {tx.tx_hex[:12]} 只收到 {len(votes)}/{len(voters)} 票，"
                f"需要 {result.quorum_size} 票背書"
            )

        self.record('decide', tx=tx.tx_hex, accepted=str(result.accepted).lower(),
                    endorse=result.endorse_count, quorum=result.quorum_size)
        if not result.accepted:
            self.logger.warning(f"交易 {tx.tx_hex[:12]} 未通過共識")
            self.results[tx.tx_hex] = result
            return result

        result = ConsensusResult(result.tx_id, True, result.endorsements, result.quorum_size,
                                 result.electorate_size, accepted_time=self.clock)
        self.results[tx.tx_hex] = result
        public = Proposal(tx, proposal.proposer)
        for node in self.peers:
            payload = proposal if node.member_id in voters else public
            if node is proposer:
                self._accept(node, payload)
            else:
                self.send(proposer, node, 'accept', payload)
        self.run_until_idle()

        if len(self.sealer().pending) >= self.batch_size:
            self.seal()
        return result

    # 封存與同步

    def sealer(self) -> PeerNode:
        """依加入順序第一個存活的節點"""
        live = self.live_peers()
        if not live:
            raise NetworkStalled("沒有存活的節點")
        return live[0]

    def _sealable(self, node: PeerNode) -> List[Transaction]:
        ready = []
        for tx_hex, tx in list(node.pending.items()):
            if tx_hex in node.chain:
                del node.pending[tx_hex]
            else:
                ready.append(tx)
        return ready

    def seal(self) -> Optional[Block]:
        """由封存節點封存待封存交易並廣播區塊"""
        node = self.sealer()
        self.resync(node)
        for other in self.peers:
            if other is not node and self.can_reach(node, other):
                for tx_hex, tx in other.pending.items():
                    if tx_hex in other.accepted and tx_hex not in node.chain:
                        node.pending.setdefault(tx_hex, tx)
                        node.accepted.add(tx_hex)
        ready = self._sealable(node)
        if not ready:
            return None
        block = seal_block(ready, node.chain, accepted=node.accepted, sealed_time=self.tick())
        node.pending.clear()
        self.record('seal', sender=node.name, index=block.index, digest=block.block_digest.hex(),
                    transactions=len(block.transactions))
        self.logger.info(f"{node.name} 封存區塊 {block.index}（{len(block.transactions)} 筆交易）")
        for other in self.peers:
            if other is not node:
                self.send(node, other, 'block', block)
        self.run_until_idle()
        return block

    def _adopt(self, node: PeerNode, block: Block) -> bool:
        report = verify_block(node.chain, block, node.registry)
        if not report.valid:
            self.logger.warning(f"{node.name} 拒絕區塊 {block.index}: {report.to_text()}")
            return False
        node.chain.append(block)
        for tx in block.transactions:
            node.pending.pop(tx.tx_hex, None)
        return True

    def _receive_block(self, node: PeerNode, sender: PeerNode, block: Block) -> None:
        if block.index < len(node.chain):
            return
        if block.index > len(node.chain):
            self.resync(node, sender)
        if block.index == len(node.chain):
            self._adopt(node, block)

    def resync(self, node: PeerNode, source: Optional[PeerNode] = None) -> int:
        """
        從存活節點補齊缺少的區塊、登錄表與頻道側存放

        Args:
            node: 需要同步的節點
            source: 來源節點，預設為可到達的最長鏈節點

        Returns:
            補上的區塊數
        """
        if source is None:
            candidates = [other for other in self.peers
                          if other is not node and self.can_reach(node, other)]
            if not candidates:
                return 0
            source = max(candidates, key=lambda other: (len(other.chain), len(other.registry)))

        if len(source.registry) > len(node.registry):
            node.registry = replay_registry(source.registry.members, source.registry.admission_log)

        adopted = 0
        for index in range(len(node.chain), len(source.chain)):
            if not self._adopt(node, source.chain[index]):
                break
            adopted += 1

        for channel_id, channel in list(source.channels.items()):
            node.channels.setdefault(channel_id, channel)
        for channel_id, channel in node.channels.items():
            if node.member_id not in channel.members:
                continue
            store = node.side_stores.setdefault(channel_id, {})
            for other in self.peers:
                if other.member_id in channel.members and self.can_reach(node, other):
                    for tx_hex, state in other.side_stores.get(channel_id, {}).items():
                        store.setdefault(tx_hex, dict(state))

        for tx_hex in list(node.pending):
            if tx_hex in node.chain:
                del node.pending[tx_hex]
        if adopted:
            self.record('sync', sender=source.name, receiver=node.name, blocks=adopted)
            self.logger.info(f"{node.name} 從 {source.name} 同步 {adopted} 個區塊")
        return adopted

    def converge(self) -> None:
        """讓所有存活節點向最長鏈同步"""
        for node in self.live_peers():
            self.resync(node)

    def chains(self) -> Dict[str, Chain]:
        return {node.name: node.chain for node in self.peers}


def propose_transaction(network: SimNetwork, proposer: str, tx: Transaction,
                        private_state: Optional[Mapping[str, str]] = None,
                        electorate: Optional[Iterable[str]] = None) -> ConsensusResult:
    """
    在網路上提出已簽章交易

    Args:
        network: 模擬網路
        proposer: 提案者的成員ID或節點名稱
        tx: 提案者已簽章的交易
        private_state: 只送給頻道成員的私有狀態
        electorate: 投票成員（私有交易為頻道成員）

    Returns:
        共識結果
    """
    if not network.has_peer(proposer):
        raise NotAMember(f"{proposer} 不是網路成員")
    node = network.peer(proposer)
    if node.member_id not in node.registry:
        raise NotAMember(f"{node.name} 不在登錄表中")
    return network.propose(Proposal(tx, node.member_id, private_state), electorate)


def inject_fault(network: SimNetwork, fault: Fault) -> SimNetwork:
    """
    注入網路故障

    Args:
        network: 模擬網路
        fault: 故障描述（drop / restore / sever）

    Returns:
        同一個網路物件
    """
    node = network.peer(fault.peer)
    if fault.kind is FaultKind.DROP:
        node.live = False
    elif fault.kind is FaultKind.RESTORE:
        node.live = True
        for key in [key for key in network.link_status if node.name in key]:
            del network.link_status[key]
        network.resync(node)
    else:
        if fault.other is None:
            raise UnknownPeer("sever 需要兩個節點")
        other = network.peer(fault.other)
        network.link_status[(node.name, other.name)] = False
        network.link_status[(other.name, node.name)] = False
    network.record('fault', kind=fault.kind.value, peer=node.name,
                   other=fault.other or '')
    network.logger.info(f"注入故障 {fault.kind.value} {node.name} {fault.other or ''}".rstrip())
    return network
