"""Binary dense-tensor format and labeled-collection manifests.

Tensor files are little-endian and fixed-width so round trips are bit exact:
magic ``DTN1``, u32 rank, ``rank`` u64 dims, then row-major f64 payload.
Manifests are text files with one ``label<TAB>path`` record per line; paths
are resolved relative to the manifest.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DTN1"


class TensorFormatError(ValueError):
    """File does not conform to the tensor container format."""


class TruncatedPayloadError(TensorFormatError):
    """Header promised more payload values than the file contains."""


class NonFiniteValueError(TensorFormatError):
    """Payload contains NaN or Inf."""


class ManifestError(ValueError):
    """Collection manifest is malformed or inconsistent."""


@dataclass(frozen=True)
class DenseTensor:
    """Row-major dense tensor of float64 values.

    ``data`` is flat; ``shape`` gives the logical dimensions. Feature maps
    are stored channel-last, i.e. (H, W, C).
    """

    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        if len(self.shape) == 0:
            raise TensorFormatError("empty shape is not a valid tensor")
        if any(d < 0 for d in self.shape):
            raise TensorFormatError(f"negative dimension in shape {self.shape}")
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64).ravel())
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "data", data)
        expected = int(np.prod(self.shape, dtype=np.int64))
        if data.size != expected:
            raise TensorFormatError(
                f"data length {data.size} does not match shape {self.shape} "
                f"(expected {expected})"
            )

    @classmethod
    def from_array(cls, arr) -> "DenseTensor":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(shape=arr.shape, data=arr.ravel())

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


def save_tensor(t: DenseTensor, path) -> None:
    """Write ``t`` to ``path`` in the DTN1 container format."""
    payload = t.data
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(t.shape)))
        fh.write(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        fh.write(payload.astype("<f8", copy=False).tobytes())


def load_tensor(path) -> DenseTensor:
    """Read a DTN1 tensor file, validating header, length, and finiteness."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: missing DTN1 magic bytes")
    (rank,) = struct.unpack_from("<I", raw, 4)
    header_end = 8 + 8 * rank
    if rank == 0:
        raise TensorFormatError(f"{path}: rank 0 tensor is not allowed")
    if len(raw) < header_end:
        raise TensorFormatError(f"{path}: header truncated (rank {rank})")
    shape = struct.unpack_from(f"<{rank}Q", raw, 8)
    count = int(np.prod(shape, dtype=np.int64))
    body = raw[header_end:]
    if len(body) < 8 * count:
        raise TruncatedPayloadError(
            f"{path}: expected {count} payload values, found {len(body) // 8}"
        )
    if len(body) > 8 * count:
        raise TensorFormatError(f"{path}: {len(body) - 8 * count} trailing bytes")
    data = np.frombuffer(body, dtype="<f8", count=count).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise NonFiniteValueError(
            f"{path}: non-finite value at flat index {int(bad[0])}"
        )
    return DenseTensor(shape=shape, data=data)


@dataclass(frozen=True)
class LabeledSetCollection:
    """Class-labeled tensors sharing one trailing channel dimension."""

    sets: tuple = field(default_factory=tuple)
    class_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))
        channels = None
        for label, tensor in self.sets:
            if not (0 <= label < self.class_count):
                raise ManifestError(
                    f"label {label} outside [0, {self.class_count})"
                )
            c = tensor.shape[-1]
            if channels is None:
                channels = c
            elif c != channels:
                raise ManifestError(
                    f"inconsistent channel dims: {channels} vs {c}"
                )

    @property
    def channels(self) -> int | None:
        return self.sets[0][1].shape[-1] if self.sets else None

    def by_class(self) -> dict[int, list[DenseTensor]]:
        out: dict[int, list[DenseTensor]] = {}
        for label, tensor in self.sets:
            out.setdefault(label, []).append(tensor)
        return out


def load_collection(manifest_path) -> LabeledSetCollection:
    """Load every ``label<TAB>path`` record of a manifest file."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ManifestError(
                    f"{manifest_path}:{lineno}: expected 'label<TAB>path'"
                )
            try:
                label = int(parts[0])
            except ValueError as exc:
                raise ManifestError(
                    f"{manifest_path}:{lineno}: bad label {parts[0]!r}"
                ) from exc
            if label < 0:
                raise ManifestError(f"{manifest_path}:{lineno}: negative label")
            path = parts[1]
            if not os.path.isabs(path):
                path = os.path.join(base, path)
            entries.append((label, load_tensor(path)))
    class_count = 1 + max((label for label, _ in entries), default=-1)
    return LabeledSetCollection(sets=tuple(entries), class_count=class_count)


def save_collection(col: LabeledSetCollection, out_dir, manifest_name="manifest.tsv") -> str:
    """Persist a collection as tensor files plus a manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for idx, (label, tensor) in enumerate(col.sets):
        name = f"set_{idx:05d}.dtn"
        save_tensor(tensor, os.path.join(out_dir, name))
        lines.append(f"{label}\t{name}")
    manifest = os.path.join(out_dir, manifest_name)
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return manifest
