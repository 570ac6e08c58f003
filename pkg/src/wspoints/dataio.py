"""Dataset ingestion and matrix serialization.

Supported inputs: IDX image/label files (the MNIST container format,
optionally gzipped), the package's own binary matrix format, and a
delimited text format.  Loaders validate eagerly and reject malformed
input instead of repairing it.

Binary matrix format ("WSPM"): a 16-byte little-endian header -- 4-byte
magic ``WSPM``, u32 row count ``d``, u32 column count ``N``, 4 reserved
zero bytes -- followed by ``d * N`` float64 values in column-major order.
Round-trips are bit-exact.

Text matrix format: a header line ``d,N`` followed by ``N`` lines, each one
column vector of ``d`` comma-separated values.
"""

from __future__ import annotations

import gzip
import hashlib
import struct

import numpy as np

from .geometry import ReferenceSet
from .imaging import ImageLayout

__all__ = [
    "DataFormatError",
    "load_idx",
    "load_idx_labels",
    "filter_by_label",
    "load_matrix",
    "save_matrix",
    "load_weights",
    "fingerprint",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
WSPM_MAGIC = b"WSPM"
WSPM_HEADER = struct.Struct("<4sIII")

# guards the u32 dimension product against absurd headers
MAX_IDX_ELEMENTS = 1 << 40


class DataFormatError(ValueError):
    """Malformed or truncated input file."""


def _read_file(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(raw: bytes, path, expected_magic: int, n_dims: int) -> tuple[int, ...]:
    header_len = 4 + 4 * n_dims
    if len(raw) < header_len:
        raise DataFormatError(
            f"{path}: truncated header, need {header_len} bytes, file has {len(raw)} (offset 0)"
        )
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad IDX magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack_from(f">{n_dims}I", raw, 4)
    for k, dim in enumerate(dims):
        if dim == 0:
            raise DataFormatError(f"{path}: zero dimension at offset {4 + 4 * k}")
    count = 1
    for dim in dims:
        count *= dim
    if count > MAX_IDX_ELEMENTS:
        raise DataFormatError(
            f"{path}: dimension overflow, header at offset 4 declares {count} elements"
        )
    payload = len(raw) - header_len
    if payload != count:
        raise DataFormatError(
            f"{path}: payload length mismatch at offset {header_len}: "
            f"header declares {count} bytes, file has {payload}"
        )
    return dims


def load_idx(path) -> tuple[ReferenceSet, ImageLayout]:
    """Load an IDX image file into a matrix with one image per column.

    Pixel bytes become float64 values in [0, 255]; the image geometry is
    returned alongside.  Paths ending in ``.gz`` are decompressed
    transparently.
    """
    raw = _read_file(path)
    count, rows, cols = _idx_header(raw, path, IDX_IMAGE_MAGIC, n_dims=3)
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    data = pixels.T.astype(np.float64)
    return ReferenceSet(data), ImageLayout(rows, cols, 1)


def load_idx_labels(path) -> np.ndarray:
    """Load an IDX label file into a uint8 vector."""
    raw = _read_file(path)
    (count,) = _idx_header(raw, path, IDX_LABEL_MAGIC, n_dims=1)
    return np.frombuffer(raw, dtype=np.uint8, offset=8).copy()


def filter_by_label(images: ReferenceSet, labels: np.ndarray, keep) -> ReferenceSet:
    """Keep only the columns whose label is in ``keep``, preserving order."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != images.n_atoms:
        raise ValueError(
            f"label vector has length {labels.shape}, expected {images.n_atoms}"
        )
    keep = set(int(k) for k in keep)
    if not keep:
        raise ValueError("label filter is empty; at least one label must be kept")
    mask = np.isin(labels, sorted(keep))
    if not mask.any():
        raise ValueError(f"no columns carry any of the labels {sorted(keep)}")
    return ReferenceSet(images.data[:, mask])


def save_matrix(matrix: np.ndarray, path, fmt: str = "auto") -> None:
    """Write a ``d x N`` matrix; ``auto`` picks binary for ``.wspm`` paths
    and text otherwise."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValueError(f"matrix must be nonempty and 2-dimensional, got shape {matrix.shape}")
    if fmt == "auto":
        fmt = "binary" if str(path).endswith(".wspm") else "text"
    d, n = matrix.shape
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(WSPM_HEADER.pack(WSPM_MAGIC, d, n, 0))
            fh.write(np.asfortranarray(matrix).tobytes(order="F"))
    elif fmt == "text":
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"{d},{n}\n")
            for m in range(n):
                fh.write(",".join(f"{v:.17g}" for v in matrix[:, m]))
                fh.write("\n")
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")


def _load_matrix_binary(raw: bytes, path) -> np.ndarray:
    if len(raw) < WSPM_HEADER.size:
        raise DataFormatError(f"{path}: truncated header at offset 0")
    magic, d, n, _reserved = WSPM_HEADER.unpack_from(raw, 0)
    if magic != WSPM_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if d == 0 or n == 0:
        raise DataFormatError(f"{path}: zero dimension in header at offset 4")
    expected = d * n * 8
    payload = len(raw) - WSPM_HEADER.size
    if payload != expected:
        have_cols = payload // (d * 8)
        raise DataFormatError(
            f"{path}: payload mismatch at offset {WSPM_HEADER.size}: header declares "
            f"{n} columns ({expected} bytes), payload holds {have_cols} ({payload} bytes)"
        )
    flat = np.frombuffer(raw, dtype="<f8", offset=WSPM_HEADER.size)
    return flat.reshape((d, n), order="F").copy()


def _load_matrix_text(raw: bytes, path) -> np.ndarray:
    text = raw.decode("ascii", errors="replace")
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    try:
        d, n = (int(tok.strip()) for tok in header)
    except ValueError:
        raise DataFormatError(f"{path}: line 1: malformed header {lines[0]!r}, expected 'd,N'") from None
    if d < 1 or n < 1:
        raise DataFormatError(f"{path}: line 1: dimensions must be positive, got {d},{n}")
    body = [line for line in lines[1:] if line.strip()]
    if len(body) != n:
        raise DataFormatError(f"{path}: header declares {n} columns, file has {len(body)}")
    data = np.empty((d, n), dtype=np.float64)
    for m, line in enumerate(body):
        tokens = line.split(",")
        if len(tokens) != d:
            raise DataFormatError(
                f"{path}: line {m + 2}: expected {d} values, found {len(tokens)}"
            )
        for k, token in enumerate(tokens):
            try:
                data[k, m] = float(token)
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {m + 2}, column {k + 1}: non-numeric token {token.strip()!r}"
                ) from None
    return data


def load_matrix(path) -> ReferenceSet:
    """Load a matrix file, sniffing binary versus text by the magic bytes."""
    raw = _read_file(path)
    if raw[:4] == WSPM_MAGIC:
        return ReferenceSet(_load_matrix_binary(raw, path))
    return ReferenceSet(_load_matrix_text(raw, path))


def load_weights(path, expected_len: int) -> np.ndarray:
    """Load a plain weight vector: one value per line, ``#`` comments allowed."""
    weights = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                weights.append(float(stripped))
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: non-numeric token {stripped!r}"
                ) from None
    if len(weights) != expected_len:
        raise DataFormatError(
            f"{path}: found {len(weights)} weights, expected {expected_len}"
        )
    return np.asarray(weights, dtype=np.float64)


def fingerprint(path) -> str:
    """64-bit content hash of a file, as 16 hex digits."""
    digest = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
