"""
錯誤類型模組

所有函式庫操作拋出的錯誤都繼承自 LedgerFlowError，
服務層再依類型轉換成固定的結束碼。
"""
from typing import Optional


class LedgerFlowError(Exception):
    """所有帳本錯誤的基底類"""


# 帳本核心
class SerializationError(LedgerFlowError):
    """欄位內容無法以正規格式序列化"""


class LedgerFormatError(LedgerFlowError):
    """帳本檔案無法解析或內容被截斷"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        prefix = f"第 {line_number} 行: " if line_number is not None else ""
        super().__init__(f"{prefix}{message}")


class EmptyBlock(LedgerFlowError):
    """待封存交易為空"""


class UnverifiedTransaction(LedgerFlowError):
    """交易尚未通過共識"""


# 成員管理
class SeedTooShort(LedgerFlowError):
    """金鑰種子少於 32 位元組"""


class InsufficientApprovals(LedgerFlowError):
    """加入申請未達多數核准"""


class DuplicateMember(LedgerFlowError):
    """成員已存在"""


class BadApprovalSignature(LedgerFlowError):
    """核准簽章無效"""


class UnknownMember(LedgerFlowError):
    """成員不在登錄表中"""


# 共識與網路
class NotAMember(LedgerFlowError):
    """提案者不是網路成員"""


class NetworkStalled(LedgerFlowError):
    """存活節點不足以形成法定人數"""


class DuplicateEndorser(LedgerFlowError):
    """同一背書者重複出現"""


class ScriptError(LedgerFlowError):
    """工作負載腳本格式錯誤"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        prefix = f"第 {line_number} 行: " if line_number is not None else ""
        super().__init__(f"{prefix}{message}")


class UnknownPeer(LedgerFlowError):
    """節點不存在"""


# 合約
class DuplicateContract(LedgerFlowError):
    """合約已註冊"""


class ContractNotFound(LedgerFlowError):
    """合約未註冊"""


class StepFailure(LedgerFlowError):
    """工作流程步驟執行失敗"""

    def __init__(self, step_index: int, reason: str):
        self.step_index = step_index
        self.reason = reason
        super().__init__(f"步驟 {step_index} 失敗: {reason}")


class MalformedWorkflow(LedgerFlowError):
    """工作流程描述不合法"""


class DegenerateInput(LedgerFlowError):
    """線性回歸輸入退化"""


# 溯源
class InconsistentTrace(LedgerFlowError):
    """執行軌跡與工作流程不一致"""


class EmptyTrace(LedgerFlowError):
    """執行軌跡為空"""


class ReservedKeyCollision(LedgerFlowError):
    """狀態已使用保留的 prov.* 鍵"""


class NoProvenance(LedgerFlowError):
    """交易不含溯源資料"""


class UnresolvableReference(LedgerFlowError):
    """引用的溯源資源不存在"""


class DigestMismatch(LedgerFlowError):
    """資源摘要不符"""


class IrrecoverableRecord(LedgerFlowError):
    """溯源紀錄不足以重建工作流程"""


class UnknownParent(LedgerFlowError):
    """父交易不在帳本中"""


# 存取
class TooFewMembers(LedgerFlowError):
    """頻道成員少於兩位"""


class ChannelAccessDenied(LedgerFlowError):
    """交易方不是頻道成員"""


class UnknownTransaction(LedgerFlowError):
    """交易不在帳本中"""


class CyclicLineage(LedgerFlowError):
    """衍生血緣出現循環"""
