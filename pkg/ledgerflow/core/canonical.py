"""
正規序列化與摘要模組

正規格式：鍵以位元組順序排序、無多餘空白、UTF-8 輸出、
位元組欄位以小寫十六進位字串表示、只允許物件/列表/字串/整數。
"""
import hashlib
import json
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Context
from typing import Any, Union

from ..utils.errors import SerializationError

DIGEST_SIZE = 32
_HEX_DIGEST = re.compile(r'[0-9a-f]{64}')
_HEX_BYTES = re.compile(r'(?:[0-9a-f]{2})*')
_REAL_CONTEXT = Context(prec=17, rounding=ROUND_HALF_EVEN)


@dataclass(frozen=True, order=True)
class Digest:
    """32 位元組摘要值"""
    value: bytes

    def __post_init__(self):
        if not isinstance(self.value, bytes) or len(self.value) != DIGEST_SIZE:
            raise ValueError(f"摘要長度必須為 {DIGEST_SIZE} 位元組")

    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return self.hex()

    @classmethod
    def from_hex(cls, text: str) -> 'Digest':
        """
        由 64 個小寫十六進位字元還原摘要

        大寫字元視為非正規輸入而拒絕，避免同一摘要有兩種文字表示。
        """
        if not isinstance(text, str) or not _HEX_DIGEST.fullmatch(text):
            raise ValueError(f"不是正規摘要字串: {text!r}")
        return cls(bytes.fromhex(text))


ZERO_DIGEST = Digest(bytes(DIGEST_SIZE))


def bytes_from_hex(text: str) -> bytes:
    """由小寫十六進位字串還原位元組，拒絕大寫與奇數長度"""
    if not isinstance(text, str) or not _HEX_BYTES.fullmatch(text):
        raise ValueError(f"不是正規十六進位字串: {text!r}")
    return bytes.fromhex(text)


def compute_digest(data: bytes) -> Digest:
    """計算 SHA-256 摘要"""
    return Digest(hashlib.sha256(data).digest())


def _to_plain(value: Any) -> Any:
    # bool 是 int 的子類，必須先排除
    if isinstance(value, bool) or value is None or isinstance(value, float):
        raise SerializationError(f"正規格式不支援的值: {value!r}")
    if isinstance(value, str):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, Digest):
        return value.hex()
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, dict):
        plain = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise SerializationError(f"物件鍵必須是字串: {key!r}")
            plain[key] = _to_plain(item)
        return plain
    if isinstance(value, (list, tuple)):
        return [_to_plain(item) for item in value]
    raise SerializationError(f"正規格式不支援的類型: {type(value).__name__}")


def canonical_dumps(value: Any) -> bytes:
    """
    將值序列化為正規位元組序列

    Args:
        value: 由 dict/list/str/int/bytes/Digest 組成的值

    Returns:
        UTF-8 位元組序列
    """
    plain = _to_plain(value)
    text = json.dumps(plain, sort_keys=True, separators=(',', ':'), ensure_ascii=False)
    try:
        return text.encode('utf-8')
    except UnicodeEncodeError as e:
        raise SerializationError(f"欄位含非 UTF-8 內容: {e}") from e


def _reject_constant(name: str) -> Any:
    raise SerializationError(f"正規格式不允許常數 {name}")


def _reject_float(text: str) -> Any:
    raise SerializationError(f"正規格式不允許實數字面值 {text}")


def _unique_pairs(pairs: list) -> dict:
    result = {}
    for key, item in pairs:
        if key in result:
            raise SerializationError(f"重複的物件鍵: {key}")
        result[key] = item
    return result


def _check_plain(value: Any) -> None:
    if isinstance(value, bool) or value is None:
        raise SerializationError(f"正規格式不允許的值: {value!r}")
    if isinstance(value, dict):
        for item in value.values():
            _check_plain(item)
    elif isinstance(value, list):
        for item in value:
            _check_plain(item)


def canonical_loads(data: Union[bytes, str]) -> Any:
    """
    解析正規序列化內容

    只接受重新序列化後位元組完全相同的輸入。

    Args:
        data: 正規位元組或字串

    Returns:
        由 dict/list/str/int 組成的值
    """
    raw = data.encode('utf-8') if isinstance(data, str) else bytes(data)
    try:
        text = raw.decode('utf-8')
        value = json.loads(
            text,
            parse_float=_reject_float,
            parse_constant=_reject_constant,
            object_pairs_hook=_unique_pairs,
        )
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SerializationError(f"無法解析正規內容: {e}") from e
    _check_plain(value)
    if canonical_dumps(value) != raw:
        raise SerializationError("內容不是正規形式")
    return value


def render_real(x: float) -> str:
    """
    以 17 位有效數字、四捨六入五成雙輸出實數

    Args:
        x: 實數

    Returns:
        十進位文字
    """
    d = _REAL_CONTEXT.create_decimal(float(x))
    if d.is_zero():
        return '0'
    return '{:g}'.format(d)
