# utils/file_handler.py

import csv
import json
import logging
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import IO, Any, Dict, Iterable, Iterator, List, Sequence, Union

import numpy as np

from config import EMBEDDING_MAGIC, INDEX_MAGIC, LABELS_HEADER
from sampling.core import EmbeddingMatrix, MidxError
from sampling.quantization import MultiIndex, QuantizerKind, index_from_assignments

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_KIND_CODES = {QuantizerKind.PRODUCT: 0, QuantizerKind.RESIDUAL: 1}
_CODE_KINDS = {code: kind for kind, code in _KIND_CODES.items()}

_EMB_HEADER = struct.Struct("<II")
_INDEX_HEADER = struct.Struct("<BIII")


class DataFormatError(MidxError):
    """Raised for missing, unreadable or malformed artifact files."""

    pass


@contextmanager
def safe_file_handler(path: PathLike, mode: str = "rb") -> Iterator[IO]:
    """
    Opens an artifact file and converts I/O and decode failures.

    Args:
        path: File path.
        mode: Open mode.

    Yields:
        The open file object.

    Raises:
        DataFormatError: If opening, reading or decoding fails.
    """
    try:
        newline = "" if "b" not in mode else None
        with open(path, mode, newline=newline) as f:
            yield f
    except DataFormatError:
        raise
    except (OSError, ValueError, struct.error, UnicodeDecodeError, MidxError) as e:
        logger.exception("Error handling file %s: %s", path, e)
        raise DataFormatError(f"Error handling file {path}: {e}") from e


def _take(buf: bytes, offset: int, count: int, dtype: str, path: PathLike) -> np.ndarray:
    size = np.dtype(dtype).itemsize * count
    if offset + size > len(buf):
        raise DataFormatError(f"{path}: truncated payload")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def save_embeddings(path: PathLike, data: Union[EmbeddingMatrix, np.ndarray]) -> None:
    """Writes an N×D matrix as MIDXEMB1 (float32 little-endian, row-major)."""
    arr = data.data if isinstance(data, EmbeddingMatrix) else np.asarray(data)
    if arr.ndim != 2:
        raise DataFormatError("Embedding payload must be a 2-D matrix")
    with safe_file_handler(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(_EMB_HEADER.pack(*arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_embeddings(path: PathLike) -> EmbeddingMatrix:
    """
    Reads a MIDXEMB1 file as float64 embeddings.

    Raises:
        DataFormatError: On a bad magic, wrong payload length or non-finite values.
    """
    with safe_file_handler(path, "rb") as f:
        buf = f.read()
    if buf[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise DataFormatError(f"{path}: not an embedding file")
    offset = len(EMBEDDING_MAGIC)
    if len(buf) < offset + _EMB_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    n, d = _EMB_HEADER.unpack_from(buf, offset)
    offset += _EMB_HEADER.size
    if len(buf) - offset != n * d * 4:
        raise DataFormatError(f"{path}: payload is {len(buf) - offset} bytes, expected {n * d * 4}")
    values = np.frombuffer(buf, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    if not np.all(np.isfinite(values)):
        raise DataFormatError(f"{path}: non-finite values")
    try:
        return EmbeddingMatrix(values.astype(np.float64))
    except MidxError as e:
        raise DataFormatError(f"{path}: {e}") from e


def save_index(path: PathLike, index: MultiIndex) -> None:
    """Writes codebooks and assignments as MIDXIDX1; residuals and cells are not stored."""
    with safe_file_handler(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(_INDEX_HEADER.pack(_KIND_CODES[index.kind], index.n_classes, index.dim, index.k))
        for book in index.codebooks:
            f.write(np.ascontiguousarray(book, dtype="<f8").tobytes())
        f.write(index.assign1.astype("<u4").tobytes())
        f.write(index.assign2.astype("<u4").tobytes())


def load_index(path: PathLike, emb: EmbeddingMatrix) -> MultiIndex:
    """
    Reads a MIDXIDX1 file and rebuilds the index against ``emb``.

    Raises:
        DataFormatError: On a bad header, a length mismatch or a catalog mismatch.
    """
    with safe_file_handler(path, "rb") as f:
        buf = f.read()
    if buf[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise DataFormatError(f"{path}: not an index file")
    offset = len(INDEX_MAGIC)
    if len(buf) < offset + _INDEX_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    code, n, d, k = _INDEX_HEADER.unpack_from(buf, offset)
    offset += _INDEX_HEADER.size
    if code not in _CODE_KINDS:
        raise DataFormatError(f"{path}: unknown quantizer code {code}")
    kind = _CODE_KINDS[code]
    if (n, d) != (emb.n_classes, emb.dim):
        raise DataFormatError(
            f"{path}: index covers N={n}, D={d}; catalog has N={emb.n_classes}, D={emb.dim}"
        )
    width = d // 2 if kind == QuantizerKind.PRODUCT else d
    expected = 2 * k * width * 8 + 2 * n * 4
    if len(buf) - offset != expected:
        raise DataFormatError(f"{path}: payload is {len(buf) - offset} bytes, expected {expected}")

    books = []
    for _ in range(2):
        books.append(_take(buf, offset, k * width, "<f8", path).reshape(k, width))
        offset += k * width * 8
    a1 = _take(buf, offset, n, "<u4", path)
    a2 = _take(buf, offset + n * 4, n, "<u4", path)
    try:
        return index_from_assignments(emb, kind, (books[0], books[1]), a1, a2)
    except MidxError as e:
        raise DataFormatError(f"{path}: {e}") from e


def write_labels(path: PathLike, labels: Sequence[int]) -> None:
    with safe_file_handler(path, "w") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LABELS_HEADER)
        writer.writerows((j, int(c)) for j, c in enumerate(labels))


def read_labels(path: PathLike) -> np.ndarray:
    """
    Reads a ``query_id,class_id`` CSV into a label vector indexed by query id.

    Raises:
        DataFormatError: On a wrong header or query ids that are not 0..Q-1.
    """
    with safe_file_handler(path, "r") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != LABELS_HEADER:
        raise DataFormatError(f"{path}: expected header {','.join(LABELS_HEADER)}")
    try:
        pairs = sorted((int(q), int(c)) for q, c in (row for row in rows[1:] if row))
    except ValueError as e:
        raise DataFormatError(f"{path}: non-integer entry") from e
    if [q for q, _ in pairs] != list(range(len(pairs))):
        raise DataFormatError(f"{path}: query ids must be 0..{len(pairs) - 1}")
    return np.array([c for _, c in pairs], dtype=np.int64)


def _plain(obj: Any) -> Dict[str, Any]:
    record = asdict(obj) if is_dataclass(obj) else dict(obj)
    return {k: v for k, v in record.items() if not isinstance(v, np.ndarray)}


def _json_value(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(stream: IO, obj: Any) -> None:
    """
    Writes one report object as a strict JSON line.

    Non-finite floats become null; reports carry a flag saying which ones.
    """
    record = {k: _json_value(v) for k, v in _plain(obj).items()}
    stream.write(json.dumps(record, allow_nan=False) + "\n")


def write_csv(stream: IO, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)


def write_records_csv(stream: IO, records: List[Any]) -> None:
    """Writes dataclass or dict records as CSV with the first record's keys as header."""
    plain = [_plain(r) for r in records]
    header = list(plain[0]) if plain else []
    write_csv(stream, header, ([r[h] for h in header] for r in plain))


def write_train_report(stream: IO, report) -> None:
    """Writes a TrainReport as ``epoch,full_loss,grad_norm`` rows."""
    write_csv(stream, ("epoch", "full_loss", "grad_norm"), report.rows())
