"""
交易、區塊與雜湊鏈模組
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import (
    Collection,
    Container,
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from .canonical import (
    ZERO_DIGEST,
    Digest,
    bytes_from_hex,
    canonical_dumps,
    canonical_loads,
    compute_digest,
)
from .membership import MembershipRegistry, Signer, verify_with_key
from ..utils.errors import (
    EmptyBlock,
    LedgerFormatError,
    SerializationError,
    UnverifiedTransaction,
)
from ..utils.logger import setup_logger

logger = setup_logger('ledger')


@dataclass(frozen=True)
class Transaction:
    """一次工作流程執行的簽章交易紀錄"""
    initiator: str
    responder: str
    asset_id: str
    contract_id: str
    logical_time: int
    state: Mapping[str, str] = field(default_factory=dict)
    wall_time: Optional[str] = None
    channel_id: Optional[str] = None
    signature: Optional[bytes] = None
    tx_id: Optional[Digest] = None

    def __post_init__(self):
        texts = [self.initiator, self.responder, self.asset_id, self.contract_id]
        texts += [v for v in (self.wall_time, self.channel_id) if v is not None]
        if not all(isinstance(v, str) for v in texts):
            raise ValueError("交易識別欄位必須是字串")
        if not isinstance(self.logical_time, int) or self.logical_time < 0:
            raise ValueError(f"logical_time 必須是非負整數: {self.logical_time!r}")
        for key, value in self.state.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValueError(f"狀態鍵值必須是字串: {key!r}")
        object.__setattr__(self, 'state', dict(sorted(self.state.items())))

    def __hash__(self) -> int:
        return hash((self.tx_id, self.signature, self.logical_time, self.asset_id))

    def to_dict(self, include_tx_id: bool = True, include_signature: bool = True) -> dict:
        data = {
            'asset_id': self.asset_id,
            'contract_id': self.contract_id,
            'initiator': self.initiator,
            'logical_time': self.logical_time,
            'responder': self.responder,
            'state': dict(self.state),
        }
        if self.wall_time is not None:
            data['wall_time'] = self.wall_time
        if self.channel_id is not None:
            data['channel_id'] = self.channel_id
        if include_signature and self.signature is not None:
            data['signature'] = self.signature
        if include_tx_id and self.tx_id is not None:
            data['tx_id'] = self.tx_id
        return data

    def signing_bytes(self) -> bytes:
        """簽章範圍：不含 signature 與 tx_id"""
        return canonical_dumps(self.to_dict(include_tx_id=False, include_signature=False))

    def compute_tx_id(self) -> Digest:
        """交易ID：不含 tx_id 本身的正規序列化摘要"""
        return compute_digest(canonical_dumps(self.to_dict(include_tx_id=False)))

    def signed(self, signer: Signer) -> 'Transaction':
        """由發起者簽章並填入 tx_id"""
        unsigned = replace(self, signature=None, tx_id=None)
        signed = replace(unsigned, signature=signer.sign(unsigned.signing_bytes()))
        return replace(signed, tx_id=signed.compute_tx_id())

    def with_state(self, state: Mapping[str, str]) -> 'Transaction':
        """回傳替換狀態、清除簽章與ID的新交易"""
        return replace(self, state=dict(state), signature=None, tx_id=None)

    @property
    def sort_key(self) -> Tuple[int, str]:
        return self.logical_time, self.tx_id.hex() if self.tx_id else ''

    @property
    def tx_hex(self) -> str:
        return self.tx_id.hex() if self.tx_id else ''

    @classmethod
    def from_dict(cls, data: dict) -> 'Transaction':
        allowed = {'asset_id', 'channel_id', 'contract_id', 'initiator', 'logical_time',
                   'responder', 'signature', 'state', 'tx_id', 'wall_time'}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"未知的交易欄位: {sorted(unknown)}")
        return cls(
            initiator=data['initiator'],
            responder=data['responder'],
            asset_id=data['asset_id'],
            contract_id=data['contract_id'],
            logical_time=data['logical_time'],
            state=data['state'],
            wall_time=data.get('wall_time'),
            channel_id=data.get('channel_id'),
            signature=bytes_from_hex(data['signature']) if 'signature' in data else None,
            tx_id=Digest.from_hex(data['tx_id']) if 'tx_id' in data else None,
        )


@dataclass(frozen=True)
class Block:
    """以摘要連結前一區塊的交易集合"""
    index: int
    prev_digest: Digest
    transactions: Tuple[Transaction, ...]
    sealed_time: int
    block_digest: Optional[Digest] = None

    def __post_init__(self):
        for name in ('index', 'sealed_time'):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ValueError(f"{name} 必須是非負整數: {value!r}")

    def to_dict(self, include_digest: bool = True) -> dict:
        data = {
            'index': self.index,
            'prev_digest': self.prev_digest,
            'sealed_time': self.sealed_time,
            'transactions': [tx.to_dict() for tx in self.transactions],
        }
        if include_digest and self.block_digest is not None:
            data['block_digest'] = self.block_digest
        return data

    def compute_digest(self) -> Digest:
        return compute_digest(canonical_dumps(self.to_dict(include_digest=False)))

    @classmethod
    def from_dict(cls, data: dict) -> 'Block':
        allowed = {'block_digest', 'index', 'prev_digest', 'sealed_time', 'transactions'}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"未知的區塊欄位: {sorted(unknown)}")
        return cls(
            index=data['index'],
            prev_digest=Digest.from_hex(data['prev_digest']),
            transactions=tuple(Transaction.from_dict(tx) for tx in data['transactions']),
            sealed_time=data['sealed_time'],
            block_digest=Digest.from_hex(data['block_digest']) if 'block_digest' in data else None,
        )


def canonical_serialize(value: Union[Transaction, Block]) -> bytes:
    """
    交易或區塊的正規序列化

    未設定的摘要/簽章欄位不輸出。

    Args:
        value: 交易或區塊

    Returns:
        正規位元組序列
    """
    if isinstance(value, (Transaction, Block)):
        return canonical_dumps(value.to_dict())
    raise SerializationError(f"不支援的類型: {type(value).__name__}")


def parse_transaction(data: bytes) -> Transaction:
    try:
        return Transaction.from_dict(canonical_loads(data))
    except (KeyError, TypeError, ValueError) as e:
        raise SerializationError(f"交易格式錯誤: {e}") from e


def parse_block(data: bytes) -> Block:
    try:
        return Block.from_dict(canonical_loads(data))
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        raise SerializationError(f"區塊格式錯誤: {e}") from e


class Chain:
    """只能附加的區塊雜湊鏈"""

    def __init__(self, blocks: Optional[Sequence[Block]] = None):
        """
        初始化雜湊鏈

        Args:
            blocks: 既有區塊，不做連結檢查（驗證交給 validate_chain）
        """
        self._blocks: List[Block] = list(blocks or [])
        self._tx_index: Dict[str, Transaction] = {}
        for block in self._blocks:
            self._index_block(block)

    def _index_block(self, block: Block) -> None:
        for tx in block.transactions:
            self._tx_index.setdefault(tx.tx_hex, tx)

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self._blocks)

    def __getitem__(self, index: int) -> Block:
        return self._blocks[index]

    def __contains__(self, tx_id: object) -> bool:
        return isinstance(tx_id, str) and tx_id in self._tx_index

    @property
    def blocks(self) -> Tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def last_digest(self) -> Digest:
        if not self._blocks:
            return ZERO_DIGEST
        return self._blocks[-1].block_digest

    @property
    def last_sealed_time(self) -> int:
        return self._blocks[-1].sealed_time if self._blocks else 0

    def append(self, block: Block) -> None:
        """附加區塊；索引與前向連結必須吻合"""
        if block.index != len(self._blocks) or block.prev_digest != self.last_digest:
            raise ValueError(f"區塊 {block.index} 無法接在鏈尾 (長度 {len(self._blocks)})")
        if block.block_digest != block.compute_digest():
            raise ValueError(f"區塊 {block.index} 摘要不符")
        self._blocks.append(block)
        self._index_block(block)

    def transactions(self) -> Iterator[Transaction]:
        for block in self._blocks:
            yield from block.transactions

    def find(self, tx_id: Union[str, Digest]) -> Optional[Transaction]:
        key = tx_id.hex() if isinstance(tx_id, Digest) else tx_id
        return self._tx_index.get(key)

    def copy(self) -> 'Chain':
        return Chain(self._blocks)

    def to_bytes(self) -> bytes:
        return b''.join(canonical_serialize(block) + b'\n' for block in self._blocks)


def seal_block(pending: Sequence[Transaction], chain: Chain, *,
               accepted: Collection[str], sealed_time: Optional[int] = None) -> Block:
    """
    將已通過共識的交易封存成區塊並附加到鏈尾

    Args:
        pending: 待封存交易
        chain: 目標雜湊鏈（單一寫入者）
        accepted: 共識通過的 tx_id 十六進位集合
        sealed_time: 封存邏輯時間，預設為鏈上與交易中最大的時間

    Returns:
        新封存的區塊
    """
    if not pending:
        raise EmptyBlock("沒有待封存的交易")
    for tx in pending:
        if tx.tx_id is None or tx.tx_hex not in accepted:
            raise UnverifiedTransaction(f"交易 {tx.tx_hex[:12]} 尚未通過共識")

    transactions = tuple(sorted(pending, key=lambda tx: tx.sort_key))
    if sealed_time is None:
        sealed_time = max([chain.last_sealed_time] + [tx.logical_time for tx in transactions])

    block = Block(
        index=len(chain),
        prev_digest=chain.last_digest,
        transactions=transactions,
        sealed_time=sealed_time,
    )
    block = replace(block, block_digest=block.compute_digest())
    chain.append(block)
    logger.debug(f"封存區塊 {block.index}，共 {len(transactions)} 筆交易")
    return block


class FailureKind(str, Enum):
    """鏈驗證失敗類型"""
    BROKEN_LINK = 'BrokenLink'
    BAD_DIGEST = 'BadDigest'
    BAD_SIGNATURE = 'BadSignature'
    NON_MONOTONIC_TIME = 'NonMonotonicTime'
    BAD_ORDERING = 'BadOrdering'


@dataclass(frozen=True)
class ValidationReport:
    """鏈驗證報告"""
    valid: bool
    first_failure_index: Optional[int] = None
    failure_kind: Optional[FailureKind] = None
    detail: str = ''

    def to_text(self) -> str:
        if self.valid:
            return 'valid'
        return (f"invalid: block {self.first_failure_index} "
                f"{self.failure_kind.value} {self.detail}").rstrip()


def _check_block(block: Block, k: int, previous: Optional[Block], registry: MembershipRegistry,
                 seen: Container[str]) -> Optional[Tuple[FailureKind, str]]:
    if block.index != k:
        return FailureKind.BROKEN_LINK, f"索引 {block.index} 應為 {k}"
    expected_prev = ZERO_DIGEST if previous is None else previous.block_digest
    if block.prev_digest != expected_prev:
        return FailureKind.BROKEN_LINK, "prev_digest 與前一區塊不符"
    if block.block_digest is None or block.block_digest != block.compute_digest():
        return FailureKind.BAD_DIGEST, "區塊摘要不符"
    if not block.transactions:
        return FailureKind.BAD_ORDERING, "區塊沒有交易"

    for tx in block.transactions:
        if tx.tx_id is None or tx.tx_id != tx.compute_tx_id():
            return FailureKind.BAD_DIGEST, f"交易 {tx.tx_hex[:12]} 摘要不符"
    for tx in block.transactions:
        identity = registry.lookup(tx.initiator)
        if identity is None or not verify_with_key(identity.public_key, tx.signing_bytes(),
                                                   tx.signature):
            return FailureKind.BAD_SIGNATURE, f"交易 {tx.tx_hex[:12]} 簽章無效"

    keys = [tx.sort_key for tx in block.transactions]
    if any(a >= b for a, b in zip(keys, keys[1:])):
        return FailureKind.BAD_ORDERING, "交易未依 (logical_time, tx_id) 排序"
    for tx in block.transactions:
        if tx.tx_hex in seen:
            return FailureKind.BAD_ORDERING, f"交易 {tx.tx_hex[:12]} 重複出現"

    # 封存時間遞增；交易時間只需不晚於所屬區塊的封存時間
    if previous is not None and block.sealed_time < previous.sealed_time:
        return FailureKind.NON_MONOTONIC_TIME, "封存時間倒退"
    if block.sealed_time < keys[-1][0]:
        return FailureKind.NON_MONOTONIC_TIME, "封存時間早於交易時間"
    return None


def validate_chain(chain: Chain, registry: MembershipRegistry) -> ValidationReport:
    """
    驗證整條雜湊鏈

    失敗以報告回傳而不拋出例外。

    Args:
        chain: 雜湊鏈
        registry: 用來驗證簽章的成員登錄表

    Returns:
        驗證報告
    """
    seen: Dict[str, int] = {}
    for k in range(len(chain)):
        previous = chain[k - 1] if k > 0 else None
        failure = _check_block(chain[k], k, previous, registry, seen)
        if failure is not None:
            kind, detail = failure
            logger.debug(f"鏈驗證失敗於區塊 {k}: {kind.value} {detail}")
            return ValidationReport(False, k, kind, detail)
        for tx in chain[k].transactions:
            seen[tx.tx_hex] = k
    return ValidationReport(True)


def verify_block(chain: Chain, block: Block, registry: MembershipRegistry) -> ValidationReport:
    """
    只驗證要接在鏈尾的新區塊（同步與接收區塊用）

    Returns:
        以新區塊索引回報的驗證報告
    """
    k = len(chain)
    previous = chain[k - 1] if k > 0 else None
    failure = _check_block(block, k, previous, registry, chain)
    if failure is not None:
        kind, detail = failure
        return ValidationReport(False, k, kind, detail)
    return ValidationReport(True)


def read_ledger(path: Union[str, Path]) -> Chain:
    """
    讀取帳本檔案（每行一個正規區塊）

    Returns:
        未經驗證的雜湊鏈
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise LedgerFormatError(f"無法讀取帳本 {path}: {e}") from e

    if raw and not raw.endswith(b'\n'):
        raise LedgerFormatError("帳本檔案在行中被截斷", raw.count(b'\n') + 1)

    blocks = []
    for number, line in enumerate(raw.split(b'\n')[:-1], start=1):
        try:
            blocks.append(parse_block(line))
        except SerializationError as e:
            raise LedgerFormatError(str(e), number) from e
    return Chain(blocks)


def write_ledger(path: Union[str, Path], chain: Chain) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(chain.to_bytes())
