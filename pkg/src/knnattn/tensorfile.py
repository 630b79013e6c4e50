"""Binary tensor container for attention problems and outputs.

Little-endian layout:

    magic "ICEA" | version u32 | dtype u32 | count u32 | flags u8
    then per tensor:
    name_len u32 | name utf-8 | dtype u32 | rank u32 | dims u64 * rank | payload

The header dtype (0 = float32, 1 = float64) is the precision of every
float tensor; a mask tensor carries its own dtype code 2 and a uint8
payload. Flag bit 0 marks a causal problem (which therefore stores no
mask tensor). Parse failures report the byte offset and, when known, the
offending tensor.
"""

from __future__ import annotations

import struct

import numpy as np

from .core import AttentionProblem, Mask, MaskKind, ValidationError, as_matrix

__all__ = [
    "ParseError",
    "MAGIC",
    "VERSION",
    "FLAG_CAUSAL",
    "save_tensors",
    "load_tensors",
    "save_problem",
    "load_problem",
    "save_output",
]

MAGIC = b"ICEA"
VERSION = 1
FLAG_CAUSAL = 0x01

DTYPE_F32 = 0
DTYPE_F64 = 1
DTYPE_U8 = 2

_CODE_TO_DTYPE = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_F64: np.dtype("<f8"),
    DTYPE_U8: np.dtype("u1"),
}
_PROBLEM_NAMES = {"Q", "K", "V", "mask"}


class ParseError(ValueError):
    """Malformed tensor file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _dtype_code(dtype) -> int:
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return DTYPE_F32
    if dtype == np.float64:
        return DTYPE_F64
    if dtype == np.uint8:
        return DTYPE_U8
    raise ValidationError(f"no wire code for dtype {dtype}")


def save_tensors(path, tensors: dict[str, np.ndarray], header_dtype, flags: int = 0) -> None:
    """Write named tensors; dict order is the on-disk order."""
    header_code = _dtype_code(header_dtype)
    if header_code == DTYPE_U8:
        raise ValidationError("header dtype must be float32 or float64")
    chunks = [
        MAGIC,
        struct.pack("<III", VERSION, header_code, len(tensors)),
        struct.pack("<B", flags & 0xFF),
    ]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr.dtype)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path):
    """Read a tensor file; returns (tensors dict, header dtype, flags)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ParseError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    if len(blob) < 17:
        raise ParseError("header truncated", len(blob))
    version, header_code, count = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if header_code not in (DTYPE_F32, DTYPE_F64):
        raise ParseError(f"bad header dtype code {header_code}", 8)
    (flags,) = struct.unpack_from("<B", blob, 16)
    offset = 17
    tensors: dict[str, np.ndarray] = {}
    for t in range(count):
        if len(blob) < offset + 4:
            raise ParseError(f"tensor {t}: name length truncated", offset)
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if len(blob) < offset + name_len:
            raise ParseError(f"tensor {t}: name truncated", offset)
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if len(blob) < offset + 8:
            raise ParseError(f"tensor '{name}': dtype/rank truncated", offset)
        code, rank = struct.unpack_from("<II", blob, offset)
        offset += 8
        if code not in _CODE_TO_DTYPE:
            raise ParseError(f"tensor '{name}': unknown dtype code {code}", offset - 8)
        if len(blob) < offset + 8 * rank:
            raise ParseError(f"tensor '{name}': dims truncated", offset)
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        dtype = _CODE_TO_DTYPE[code]
        n_elems = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        nbytes = n_elems * dtype.itemsize
        if len(blob) < offset + nbytes:
            raise ParseError(
                f"tensor '{name}': payload needs {nbytes} bytes, "
                f"{len(blob) - offset} remain",
                offset,
            )
        arr = np.frombuffer(blob, dtype=dtype, count=n_elems, offset=offset)
        tensors[name] = arr.reshape(dims).copy()
        offset += nbytes
    if offset != len(blob):
        raise ParseError(f"{len(blob) - offset} trailing bytes", offset)
    return tensors, _CODE_TO_DTYPE[header_code], flags


def save_problem(path, problem: AttentionProblem) -> None:
    """Canonical problem layout: Q, K, V, then the mask grid if explicit."""
    tensors = {
        "Q": problem.queries,
        "K": problem.keys,
        "V": problem.values,
    }
    flags = 0
    if problem.mask.kind is MaskKind.CAUSAL:
        flags |= FLAG_CAUSAL
    elif problem.mask.kind is MaskKind.EXPLICIT:
        tensors["mask"] = problem.mask.bits.astype(np.uint8)
    save_tensors(path, tensors, problem.dtype, flags)


def load_problem(path) -> AttentionProblem:
    """Parse and validate an attention problem file."""
    tensors, dtype, flags = load_tensors(path)
    unknown = set(tensors) - _PROBLEM_NAMES
    if unknown:
        raise ValidationError(f"unexpected tensors {sorted(unknown)} in problem file")
    for required in ("Q", "K", "V"):
        if required not in tensors:
            raise ValidationError(f"problem file is missing tensor '{required}'")
    if flags & FLAG_CAUSAL:
        if "mask" in tensors:
            raise ValidationError("causal flag set and explicit mask both present")
        mask = Mask.causal()
    elif "mask" in tensors:
        mask = Mask.explicit(tensors["mask"].astype(bool))
    else:
        mask = Mask.none()
    return AttentionProblem(
        queries=as_matrix(tensors["Q"], dtype),
        keys=as_matrix(tensors["K"], dtype),
        values=as_matrix(tensors["V"], dtype),
        mask=mask,
    )


def save_output(path, output: np.ndarray) -> None:
    save_tensors(path, {"O": output}, output.dtype)
