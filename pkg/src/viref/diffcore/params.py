"""Named trainable tensors and the binary checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor

CHECKPOINT_MAGIC = b"VRFC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Ordered mapping from unique names to leaf tensors.

    Arrays are updated in place by the optimizer, so tensors handed out by
    :meth:`__getitem__` stay valid across steps.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        if arr.ndim == 0 or min(arr.shape) < 1:
            raise ValueError(f"parameter {name!r} needs positive dimensions, got {arr.shape}")
        t = Tensor(arr, requires_grad=trainable)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._entries.items() if t.requires_grad}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._entries.items()}

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def copy(self, dtype=None) -> "ParameterStore":
        out = ParameterStore(self.dtype if dtype is None else dtype)
        for k, t in self._entries.items():
            out.add(k, t.data, trainable=t.requires_grad)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._entries.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self._entries[k].data[...] = arr

    def fill_(self, value: float) -> None:
        for t in self._entries.values():
            t.data[...] = value

    # -- checkpoint format -------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(self._entries))]
        for name, t in self._entries.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", t.data.ndim))
            parts.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, dtype=np.float32) -> "ParameterStore":
        if buf[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        pos = 4
        try:
            version, count = struct.unpack_from("<II", buf, pos)
            pos += 8
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            store = cls(dtype)
            for _ in range(count):
                (n,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                name = buf[pos : pos + n].decode("utf-8")
                pos += n
                (rank,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}I", buf, pos)
                pos += 4 * rank
                size = int(np.prod(dims)) * 4
                if pos + size > len(buf):
                    raise CheckpointError(f"truncated payload for {name!r}")
                arr = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims)
                pos += size
                store.add(name, arr)
        except struct.error as exc:
            raise CheckpointError(f"truncated checkpoint: {exc}") from None
        if pos != len(buf):
            raise CheckpointError("trailing bytes after last parameter")
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ParameterStore":
        return cls.from_bytes(Path(path).read_bytes(), dtype)
