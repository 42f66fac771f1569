"""
資料集與內容定址資源存放模組

資料集格式：每行一個點 `<x> <y>`，實數以 17 位有效數字輸出。
資源存放：路徑為內容摘要的十六進位字串。
"""
import re
import threading
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .canonical import Digest, compute_digest, render_real

Point = Tuple[float, float]

_DATASET_NAME = re.compile(r'^[A-Za-z0-9_.\-]+$')


def encode_dataset(points: Iterable[Point]) -> bytes:
    """將點列編碼為資料集文字"""
    lines = [f"{render_real(x)} {render_real(y)}\n" for x, y in points]
    return ''.join(lines).encode('utf-8')


def decode_dataset(data: bytes) -> List[Point]:
    """
    解析資料集文字

    Returns:
        (x, y) 點列
    """
    points = []
    for number, line in enumerate(data.decode('utf-8').splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"資料集第 {number} 行格式錯誤: {line!r}")
        points.append((float(parts[0]), float(parts[1])))
    return points


class DatasetStore:
    """具名資料集存放，讀取可並行、寫入互斥"""

    def __init__(self, root: Optional[Union[str, Path]] = None):
        """
        初始化資料集存放

        Args:
            root: 目錄路徑；為None時只存在記憶體
        """
        self.root = Path(root) if root is not None else None
        self._data: Dict[str, bytes] = {}
        self._lock = threading.Lock()

    def _path(self, name: str) -> Path:
        if not _DATASET_NAME.fullmatch(name):
            raise ValueError(f"不合法的資料集名稱: {name!r}")
        return self.root / name

    def put_bytes(self, name: str, data: bytes) -> Digest:
        with self._lock:
            if self.root is not None:
                path = self._path(name)
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
            self._data[name] = data
        return compute_digest(data)

    def put_points(self, name: str, points: Sequence[Point]) -> Digest:
        return self.put_bytes(name, encode_dataset(points))

    def get_bytes(self, name: str) -> Optional[bytes]:
        if self.root is not None:
            path = self._path(name)
            if path.is_file():
                return path.read_bytes()
            return None
        return self._data.get(name)

    def get_points(self, name: str) -> Optional[List[Point]]:
        data = self.get_bytes(name)
        return decode_dataset(data) if data is not None else None

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and self.get_bytes(name) is not None

    def names(self) -> List[str]:
        if self.root is not None:
            if not self.root.is_dir():
                return []
            return sorted(p.name for p in self.root.iterdir() if p.is_file())
        return sorted(self._data)


class ResourceStore:
    """內容定址資源存放"""

    URI_PREFIX = 'resources/'

    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root) if root is not None else None
        self._data: Dict[str, bytes] = {}
        self._lock = threading.Lock()

    @classmethod
    def uri_for(cls, digest: Digest) -> str:
        return f"{cls.URI_PREFIX}{digest.hex()}"

    @classmethod
    def key_from_uri(cls, uri: str) -> str:
        """
        取出資源鍵，鍵必須是 64 位小寫十六進位摘要

        Raises:
            ValueError: 鍵不是合法摘要
        """
        key = uri[len(cls.URI_PREFIX):] if uri.startswith(cls.URI_PREFIX) else uri
        return Digest.from_hex(key).hex()

    def put(self, body: bytes) -> Digest:
        """存放內容並回傳其摘要"""
        digest = compute_digest(body)
        with self._lock:
            if self.root is not None:
                self.root.mkdir(parents=True, exist_ok=True)
                (self.root / digest.hex()).write_bytes(body)
            self._data[digest.hex()] = body
        return digest

    def get(self, key: str) -> Optional[bytes]:
        key = self.key_from_uri(key)
        if self.root is not None:
            path = self.root / key
            return path.read_bytes() if path.is_file() else None
        return self._data.get(key)
