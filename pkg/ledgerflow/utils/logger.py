"""
日誌設置模組
"""
import logging
import os
from datetime import datetime
from typing import Optional

_default_level = logging.INFO


def setup_logger(name: str = 'ledgerflow', level: Optional[int] = None,
                 log_dir: Optional[str] = None) -> logging.Logger:
    """
    設置日誌記錄器

    控制台輸出走 stderr，stdout 只保留給命令輸出。

    Args:
        name: 日誌記錄器名稱
        level: 日誌級別，預設沿用 set_log_level 設定的級別
        log_dir: 日誌目錄，預設讀取 LEDGERFLOW_LOG_DIR 或 'logs'

    Returns:
        配置好的日誌記錄器
    """
    logger = logging.getLogger(name)

    if logger.handlers:
        return logger

    level = _default_level if level is None else level
    logger.setLevel(level)
    logger.propagate = False

    # 創建日誌目錄
    log_dir = log_dir or os.getenv('LEDGERFLOW_LOG_DIR', 'logs')
    os.makedirs(log_dir, exist_ok=True)

    # 文件處理器
    file_handler = logging.FileHandler(
        os.path.join(log_dir, f"ledgerflow_{datetime.now().strftime('%Y%m%d')}.log"),
        encoding='utf-8'
    )
    file_handler.setLevel(level)

    # 控制台處理器
    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)

    # 格式器
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    file_handler.setFormatter(formatter)
    console_handler.setFormatter(formatter)

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)

    return logger


def set_log_level(level: int) -> None:
    """調整所有已建立與之後建立的日誌記錄器級別"""
    global _default_level
    _default_level = level
    for logger in list(logging.Logger.manager.loggerDict.values()):
        if isinstance(logger, logging.Logger) and logger.handlers:
            logger.setLevel(level)
            for handler in logger.handlers:
                handler.setLevel(level)
