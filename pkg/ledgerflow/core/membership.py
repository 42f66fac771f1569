"""
成員身分與許可制登錄表模組
"""
import hashlib
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .canonical import bytes_from_hex, canonical_dumps, canonical_loads, compute_digest
from ..utils.errors import (
    BadApprovalSignature,
    DuplicateMember,
    InsufficientApprovals,
    LedgerFormatError,
    SeedTooShort,
    SerializationError,
    UnknownMember,
)
from ..utils.logger import setup_logger

MIN_SEED_LENGTH = 32
ADMISSIONS_MARKER = '#admissions'

logger = setup_logger('membership')


class Role(str, Enum):
    """節點角色"""
    WMS = 'WMS'
    CLIENT = 'CLIENT'
    STAGING = 'STAGING'


@dataclass(frozen=True)
class PeerIdentity:
    """以公鑰識別的節點身分"""
    member_id: str
    public_key: bytes
    role: Role
    display_name: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'role', Role(self.role))
        if self.member_id != compute_digest(self.public_key).hex():
            raise ValueError(f"member_id 與公鑰摘要不符: {self.member_id}")

    def to_dict(self) -> dict:
        return {
            'display_name': self.display_name,
            'member_id': self.member_id,
            'public_key': self.public_key,
            'role': self.role.value,
        }

    def canonical_bytes(self) -> bytes:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> 'PeerIdentity':
        return cls(
            member_id=data['member_id'],
            public_key=bytes_from_hex(data['public_key']),
            role=Role(data['role']),
            display_name=data['display_name'],
        )


class Signer:
    """持有私鑰的簽章器，只存在於節點本地"""

    def __init__(self, seed: bytes, identity: PeerIdentity, private_key: Ed25519PrivateKey):
        self.seed = seed
        self.identity = identity
        self._private_key = private_key

    @property
    def member_id(self) -> str:
        return self.identity.member_id

    def sign(self, message: bytes) -> bytes:
        return self._private_key.sign(message)


def generate_identity(role: Union[Role, str], seed: bytes,
                      display_name: str = '') -> Tuple[PeerIdentity, Signer]:
    """
    由種子確定性地產生 Ed25519 身分

    Args:
        role: 節點角色
        seed: 至少 32 位元組的種子
        display_name: 顯示名稱

    Returns:
        (身分, 簽章器)
    """
    if len(seed) < MIN_SEED_LENGTH:
        raise SeedTooShort(f"種子長度 {len(seed)} < {MIN_SEED_LENGTH}")

    private_key = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())
    public_key = private_key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )
    identity = PeerIdentity(
        member_id=compute_digest(public_key).hex(),
        public_key=public_key,
        role=Role(role),
        display_name=display_name,
    )
    return identity, Signer(seed, identity, private_key)


def verify_with_key(public_key: bytes, message: bytes, signature: Optional[bytes]) -> bool:
    """以原始公鑰驗證簽章"""
    if not signature:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class JoinRequest:
    """加入申請"""
    candidate: PeerIdentity
    signature: bytes

    @classmethod
    def create(cls, signer: Signer) -> 'JoinRequest':
        return cls(signer.identity, signer.sign(signer.identity.canonical_bytes()))

    def is_valid(self) -> bool:
        return verify_with_key(self.candidate.public_key,
                               self.candidate.canonical_bytes(), self.signature)


Approval = Tuple[str, bytes]


def approve(signer: Signer, candidate: PeerIdentity) -> Approval:
    """現有成員對候選身分簽署核准"""
    return signer.member_id, signer.sign(candidate.canonical_bytes())


@dataclass(frozen=True)
class AdmissionEntry:
    """一筆入會紀錄"""
    member_id: str
    approvals: Tuple[Approval, ...]
    logical_time: int

    @property
    def approvers(self) -> Tuple[str, ...]:
        return tuple(member_id for member_id, _ in self.approvals)

    def to_dict(self) -> dict:
        return {
            'approvals': [{'member_id': m, 'signature': s} for m, s in self.approvals],
            'logical_time': self.logical_time,
            'member_id': self.member_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'AdmissionEntry':
        return cls(
            member_id=data['member_id'],
            approvals=tuple((a['member_id'], bytes_from_hex(a['signature']))
                            for a in data['approvals']),
            logical_time=data['logical_time'],
        )


def quorum_threshold(member_count: int) -> int:
    """嚴格多數門檻: floor(n/2) + 1"""
    return member_count // 2 + 1


@dataclass(frozen=True)
class MembershipRegistry:
    """許可制成員登錄表（不可變快照）"""
    members: Tuple[PeerIdentity, ...] = ()
    admission_log: Tuple[AdmissionEntry, ...] = ()
    _index: Dict[str, PeerIdentity] = field(default_factory=dict, init=False,
                                            repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for identity in self.members:
            if identity.member_id in index:
                raise DuplicateMember(identity.member_id)
            index[identity.member_id] = identity
        object.__setattr__(self, '_index', index)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, member_id: object) -> bool:
        return member_id in self._index

    def get(self, member_id: str) -> PeerIdentity:
        try:
            return self._index[member_id]
        except KeyError:
            raise UnknownMember(member_id) from None

    def lookup(self, member_id: str) -> Optional[PeerIdentity]:
        return self._index.get(member_id)

    def by_name(self, display_name: str) -> Optional[PeerIdentity]:
        for identity in self.members:
            if identity.display_name == display_name:
                return identity
        return None

    @property
    def member_ids(self) -> List[str]:
        return [identity.member_id for identity in self.members]


def _admit(registry: MembershipRegistry, candidate: PeerIdentity,
           approvals: Sequence[Approval], logical_time: int, *,
           strict: bool) -> MembershipRegistry:
    if candidate.member_id in registry:
        raise DuplicateMember(f"{candidate.display_name or candidate.member_id} 已是成員")

    message = candidate.canonical_bytes()
    counted: Dict[str, Approval] = {}
    for approver_id, signature in approvals:
        approver = registry.lookup(approver_id)
        if approver is None or not verify_with_key(approver.public_key, message, signature):
            if strict:
                raise BadApprovalSignature(f"核准者 {approver_id[:12]} 的簽章無效")
            logger.warning(f"略過無效的核准: {approver_id[:12]}")
            continue
        counted.setdefault(approver_id, (approver_id, signature))

    # 空登錄表由第一個身分自行加入
    if len(registry) > 0 and len(counted) < quorum_threshold(len(registry)):
        raise InsufficientApprovals(
            f"核准數 {len(counted)}，需要 {quorum_threshold(len(registry))} / {len(registry)}"
        )

    entry = AdmissionEntry(candidate.member_id, tuple(counted.values()), logical_time)
    return MembershipRegistry(
        members=registry.members + (candidate,),
        admission_log=registry.admission_log + (entry,),
    )


def approve_join(registry: MembershipRegistry, request: JoinRequest,
                 approvals: Sequence[Approval], logical_time: int = 0) -> MembershipRegistry:
    """
    依多數核准規則處理加入申請

    無效或非成員的核准不計入，有效核准須超過半數；入會紀錄只保留有效核准。

    Args:
        registry: 目前登錄表
        request: 候選者的加入申請
        approvals: (成員ID, 簽章) 列表
        logical_time: 入會的邏輯時間

    Returns:
        加入候選者後的新登錄表
    """
    if not request.is_valid():
        raise BadApprovalSignature("加入申請的自簽章無效")
    updated = _admit(registry, request.candidate, approvals, logical_time, strict=False)
    logger.debug(f"成員 {request.candidate.display_name} 加入，登錄表共 {len(updated)} 位")
    return updated


def replay_registry(members: Iterable[PeerIdentity],
                    admission_log: Iterable[AdmissionEntry]) -> MembershipRegistry:
    """
    從入會紀錄重建登錄表並重新驗證所有核准簽章

    Returns:
        重建後的登錄表
    """
    identities = {identity.member_id: identity for identity in members}
    registry = MembershipRegistry()
    for entry in admission_log:
        if entry.member_id not in identities:
            raise UnknownMember(entry.member_id)
        registry = _admit(registry, identities[entry.member_id],
                          entry.approvals, entry.logical_time, strict=True)
    if len(registry) != len(identities):
        raise UnknownMember("登錄表含有沒有入會紀錄的成員")
    return registry


def verify_signature(message: bytes, signature: Optional[bytes], member_id: str,
                     registry: MembershipRegistry) -> bool:
    """
    以登錄表中的公鑰驗證簽章

    Returns:
        簽章有效返回True
    """
    identity = registry.get(member_id)
    return verify_with_key(identity.public_key, message, signature)


def write_registry(path: Union[str, Path], registry: MembershipRegistry) -> None:
    """寫出登錄表檔案：每行一位成員，接著是入會紀錄段落"""
    lines = [identity.canonical_bytes().decode('utf-8') for identity in registry.members]
    lines.append(ADMISSIONS_MARKER)
    lines.extend(canonical_dumps(entry.to_dict()).decode('utf-8')
                 for entry in registry.admission_log)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')


def read_registry(path: Union[str, Path]) -> MembershipRegistry:
    """讀取並重放登錄表檔案"""
    try:
        text = Path(path).read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise LedgerFormatError(f"無法讀取登錄表 {path}: {e}") from e

    members: List[PeerIdentity] = []
    entries: List[AdmissionEntry] = []
    in_admissions = False
    for number, line in enumerate(text.splitlines(), start=1):
        if line == ADMISSIONS_MARKER:
            in_admissions = True
            continue
        try:
            data = canonical_loads(line)
            if in_admissions:
                entries.append(AdmissionEntry.from_dict(data))
            else:
                members.append(PeerIdentity.from_dict(data))
        except (SerializationError, KeyError, TypeError, ValueError) as e:
            raise LedgerFormatError(f"登錄表格式錯誤: {e}", number) from e

    if not in_admissions:
        raise LedgerFormatError("登錄表缺少入會紀錄段落")
    return replay_registry(members, entries)


def write_seed(path: Union[str, Path], seed: bytes) -> None:
    """以 0600 權限寫出 64 個十六進位字元的金鑰種子"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, 'w', encoding='ascii') as f:
        f.write(seed.hex() + '\n')
    os.chmod(path, 0o600)


def read_seed(path: Union[str, Path]) -> bytes:
    return bytes.fromhex(Path(path).read_text(encoding='ascii').strip())
