"""
配置管理模組
"""
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from .logger import setup_logger


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    return int(value)


@dataclass
class LedgerConfig:
    """帳本封存配置"""
    batch_size: int = 4


@dataclass
class NetworkConfig:
    """模擬網路配置"""
    seed: int = 42
    peer_count: int = 5
    max_latency: int = 3


@dataclass
class PathConfig:
    """資料目錄配置"""
    data_dir: Path = field(default_factory=lambda: Path('ledgerflow-data'))

    def peer_dir(self, name: str) -> Path:
        return self.data_dir / 'peers' / name

    def ledger_file(self, name: str) -> Path:
        return self.peer_dir(name) / 'ledger.ndjl'

    def side_store_file(self, name: str) -> Path:
        return self.peer_dir(name) / 'side_store.ndjl'

    def key_file(self, name: str) -> Path:
        return self.peer_dir(name) / 'key.seed'

    @property
    def registry_file(self) -> Path:
        return self.data_dir / 'registry.txt'

    @property
    def resources_dir(self) -> Path:
        return self.data_dir / 'resources'

    @property
    def datasets_dir(self) -> Path:
        return self.data_dir / 'datasets'

    @property
    def trace_file(self) -> Path:
        return self.data_dir / 'trace.log'


@dataclass
class CliConfig:
    """命令列配置"""
    data_dir: Path
    batch_size: int = 4
    seed: int = 42
    peer_count: int = 5
    porcelain: bool = False


class Config:
    """配置管理類"""

    def __init__(self, config_file: Optional[str] = None):
        """
        初始化配置

        Args:
            config_file: .env 配置文件路徑，若為None則搜尋預設位置
        """
        self.logger = setup_logger(self.__class__.__name__)

        if config_file:
            load_dotenv(config_file)
        else:
            load_dotenv()

        self.ledger = LedgerConfig(
            batch_size=_env_int('LEDGERFLOW_BATCH_SIZE', 4),
        )
        self.network = NetworkConfig(
            seed=_env_int('LEDGERFLOW_SEED', 42),
            peer_count=_env_int('LEDGERFLOW_PEERS', 5),
        )
        self.paths = PathConfig(
            data_dir=Path(os.getenv('LEDGERFLOW_DATA_DIR', 'ledgerflow-data')),
        )

    def validate(self) -> bool:
        """
        驗證配置是否完整

        Returns:
            配置有效返回True
        """
        if self.ledger.batch_size < 1:
            self.logger.error(f"batch_size 必須 >= 1，目前為 {self.ledger.batch_size}")
            return False
        if self.network.peer_count < 1:
            self.logger.error(f"peer_count 必須 >= 1，目前為 {self.network.peer_count}")
            return False
        if not 0 <= self.network.seed < 2 ** 64:
            self.logger.error(f"seed 必須是 64 位元無號整數，目前為 {self.network.seed}")
            return False
        return True

    def cli_config(self, data_dir: Optional[str] = None, seed: Optional[int] = None,
                   batch_size: Optional[int] = None, peers: Optional[int] = None,
                   porcelain: bool = False) -> CliConfig:
        """
        以命令列旗標覆蓋環境配置

        Returns:
            CliConfig 物件
        """
        if data_dir is not None:
            self.paths.data_dir = Path(data_dir)
        if seed is not None:
            self.network.seed = seed
        if batch_size is not None:
            self.ledger.batch_size = batch_size
        if peers is not None:
            self.network.peer_count = peers

        return CliConfig(
            data_dir=self.paths.data_dir,
            batch_size=self.ledger.batch_size,
            seed=self.network.seed,
            peer_count=self.network.peer_count,
            porcelain=porcelain,
        )
