"""
科學工作流程溯源帳本 - LedgerFlow

以許可制分散式帳本記錄科學工作流程的執行與溯源資料。

主要功能：
- 雜湊鏈帳本與防竄改驗證
- 許可制成員登錄與 Ed25519 簽章
- 背書共識與確定性網路模擬
- 內建工作流程合約與溯源擷取
- 私有頻道、查詢、衍生鏈追溯與快速重播
"""

__version__ = "1.0.0"
__author__ = "Your Name"

from .core.ledger import Block, Chain, Transaction, validate_chain
from .core.network import SimNetwork
from .core.workload import run_network
from .services.ledger_service import LedgerService
from .utils.config import CliConfig, Config

__all__ = [
    'Block',
    'Chain',
    'Transaction',
    'validate_chain',
    'SimNetwork',
    'run_network',
    'LedgerService',
    'CliConfig',
    'Config'
]
