"""Binary checkpoint container.

Layout (all integers little-endian u32)::

    b"TMOE" | version | meta_len | meta (UTF-8 JSON, sorted keys)
    then per tensor: name_len | name | rank | dims... | float64 LE values, row-major

Tensors run to end of file. Writing is canonical, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamSet
from .experts import StreamConfig, StreamKind
from .featurize import Resources

MAGIC = b"TMOE"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: StreamKind
    config: StreamConfig
    params: ParamSet
    resources_meta: dict
    epoch: int = 0
    best_dev_accuracy: float = 0.0
    source_task: str = "scratch"
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def resources(self) -> Resources:
        return Resources.from_meta(self.resources_meta)

    def metadata(self) -> dict:
        return {
            "kind": StreamKind(self.kind).value,
            "config": self.config.to_dict(),
            "resources": self.resources_meta,
            "epoch": self.epoch,
            "best_dev_accuracy": self.best_dev_accuracy,
            "source_task": self.source_task,
            "extra": self.extra,
        }

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks = [MAGIC, _U32.pack(self.version), _U32.pack(len(meta)), meta]
        for name, tensor in self.params.items():
            arr = np.ascontiguousarray(tensor.data, dtype="<f8")
            raw_name = name.encode("utf-8")
            chunks.append(_U32.pack(len(raw_name)))
            chunks.append(raw_name)
            chunks.append(_U32.pack(arr.ndim))
            chunks.extend(_U32.pack(d) for d in arr.shape)
            chunks.append(arr.tobytes(order="C"))
        return b"".join(chunks)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        view = memoryview(blob)
        pos = 0

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("truncated checkpoint")
            out = view[pos : pos + n]
            pos += n
            return out

        def u32() -> int:
            return _U32.unpack(take(4))[0]

        if bytes(take(4)) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version = u32()
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(bytes(take(u32())).decode("utf-8"))

        params = ParamSet()
        while pos < len(view):
            name = bytes(take(u32())).decode("utf-8")
            rank = u32()
            dims = tuple(u32() for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
            params.add(name, values.reshape(dims))

        return cls(
            kind=StreamKind(meta["kind"]),
            config=StreamConfig.from_dict(meta["config"]),
            params=params,
            resources_meta=meta["resources"],
            epoch=meta["epoch"],
            best_dev_accuracy=meta["best_dev_accuracy"],
            source_task=meta["source_task"],
            version=version,
            extra=meta.get("extra", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
