"""TRUP1 tensor files and checkpoint directories.

TRUP1 layout: magic ``TRUP``, version byte 0x01, u32 little-endian rank,
rank u32 little-endian dims, then product(dims) float32 little-endian
values. A checkpoint directory holds one TRUP1 file per named tensor under
``params/`` plus ``manifest.txt`` with one ``name:d1,d2,...`` line per
tensor.
"""

import dataclasses
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, FormatError
from .tensor import DTYPE, Tensor

MAGIC = b"TRUP"
VERSION = 1


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype=DTYPE)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.astype("<f4", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a TRUP1 file")
    if raw[4] != VERSION:
        raise FormatError(f"{path}: unsupported TRUP version {raw[4]}")
    (rank,) = struct.unpack_from("<I", raw, 5)
    off = 9
    if len(raw) < off + 4 * rank:
        raise FormatError(f"{path}: truncated dim list")
    dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
    off += 4 * rank
    count = 1
    for d in dims:
        count *= d
    if len(raw) != off + 4 * count:
        raise FormatError(f"{path}: expected {count} floats, file size mismatch")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
    # copy: frombuffer views are read-only
    return data.reshape(dims).astype(DTYPE, copy=True)


def named_tensors(obj, prefix: str = ""):
    """Yield (dotted-name, Tensor) pairs from a dataclass tree, in field order.

    Lists/tuples contribute an index component; None fields and plain
    config values (ints, floats, strings) are skipped.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if dataclasses.is_dataclass(obj):
        for field in dataclasses.fields(obj):
            child = getattr(obj, field.name)
            name = f"{prefix}.{field.name}" if prefix else field.name
            yield from named_tensors(child, name)
        return
    if isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from named_tensors(child, name)
        return
    # scalars/str/None: not tensors


def _manifest_line(name, shape) -> str:
    return f"{name}:{','.join(str(d) for d in shape)}"


def save_params(obj, directory) -> None:
    """Write every tensor in ``obj`` plus a shape manifest to ``directory``."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in named_tensors(obj):
        lines.append(_manifest_line(name, t.shape))
        write_tensor(directory / "params" / f"{name}.trup", t.data)
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_params(obj, directory) -> None:
    """Load tensors from ``directory`` into ``obj`` in place.

    The manifest must match the object's parameter names and shapes
    exactly; any discrepancy raises ``CheckpointError``.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.is_file():
        raise CheckpointError(f"{directory}: missing manifest.txt")
    manifest = {}
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        name, _, dims = line.partition(":")
        manifest[name] = tuple(int(d) for d in dims.split(",")) if dims else ()
    expected = {name: t.shape for name, t in named_tensors(obj)}
    if set(manifest) != set(expected):
        missing = sorted(set(expected) - set(manifest))
        extra = sorted(set(manifest) - set(expected))
        raise CheckpointError(f"manifest mismatch: missing={missing[:5]} extra={extra[:5]}")
    for name, shape in expected.items():
        if manifest[name] != shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {manifest[name]}, model {shape}")
    for name, t in named_tensors(obj):
        try:
            arr = read_tensor(directory / "params" / f"{name}.trup")
        except (FormatError, OSError) as e:
            raise CheckpointError(f"cannot read tensor {name}: {e}") from e
        if arr.shape != t.shape:
            raise CheckpointError(f"tensor file {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr
