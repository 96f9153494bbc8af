"""File implementation of the SnapshotRepository.

Each snapshot is a directory holding meta.json plus one binary blob per
array. A blob starts with a dims header:

    magic "FSCS" | version u16 | dtype u8 | pad u8 | h u32 | w u32 | c u32

followed by the little-endian array data in row-major order.
"""

import json
import shutil
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from mvcache.core.cache_state import EndpointCache
from mvcache.core.errors import ProtocolError
from mvcache.core.motion import AccumMV
from mvcache.core.repository import SnapshotRepository
from mvcache.core.tensor import FeatureMap, RecomputeMask

SNAPSHOT_MAGIC = b"FSCS"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sHBxIII")
_DTYPES: Dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<i4"),
    2: np.dtype("u1"),
}
_CODES = {dtype: code for code, dtype in _DTYPES.items()}


def encode_blob(array: np.ndarray) -> bytes:
    """Serialize a 2-d or 3-d array with the dims header."""
    dtype = np.dtype(array.dtype).newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in _CODES:
        raise ValueError(f"Unsupported snapshot dtype {array.dtype}")
    shape = array.shape + (1,) * (3 - array.ndim)
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, _CODES[dtype], *shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_blob(blob: bytes) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    """Parse a blob back into (array of shape (h, w, c), dims).

    Raises:
        ProtocolError: On bad magic, version, dtype or length
    """
    if len(blob) < _HEADER.size:
        raise ProtocolError("Snapshot blob shorter than its header")
    magic, version, code, h, w, c = _HEADER.unpack_from(blob)
    if magic != SNAPSHOT_MAGIC:
        raise ProtocolError(f"Bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise ProtocolError(f"Unsupported snapshot version {version}")
    if code not in _DTYPES:
        raise ProtocolError(f"Unknown snapshot dtype code {code}")
    dtype = _DTYPES[code]
    expected = h * w * c * dtype.itemsize
    if len(blob) - _HEADER.size != expected:
        raise ProtocolError(f"Snapshot body has {len(blob) - _HEADER.size} bytes, expected {expected}")
    array = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size).reshape(h, w, c).copy()
    return array, (h, w, c)


class FileSnapshotRepository(SnapshotRepository):
    """Snapshot store backed by a directory tree.

    Example:
        >>> repo = FileSnapshotRepository("snapshots")
        >>> repo.save("replica-000010", driver.replica)
        >>> restored = repo.load("replica-000010")
    """

    def __init__(self, root: Union[str, Path]) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _dir(self, key: str) -> Path:
        if not key or "/" in key or "\\" in key or key.startswith("."):
            raise ValueError(f"Invalid snapshot key '{key}'")
        return self.root / key

    def save(self, key: str, cache: EndpointCache) -> None:
        target = self._dir(key)
        if target.exists():
            shutil.rmtree(target)
        target.mkdir(parents=True)

        meta = {
            "name": cache.name,
            "input_shape": list(cache.input_shape),
            "layer_shapes": [list(s) for s in cache.layer_shapes],
            "last_update_frame": cache.last_update_frame,
            "seeded": cache.seeded,
            "held_masks": len(cache.held_masks),
        }
        (target / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")

        for name, array in cache.arrays().items():
            (target / f"{name}.bin").write_bytes(encode_blob(array))
        for index, mask in enumerate(cache.held_masks):
            (target / f"held_{index:02d}.bin").write_bytes(encode_blob(mask.bits.astype(np.uint8)))

    def load(self, key: str) -> Optional[EndpointCache]:
        target = self._dir(key)
        meta_path = target / "meta.json"
        if not meta_path.exists():
            return None
        meta = json.loads(meta_path.read_text(encoding="utf-8"))

        def read(name: str) -> np.ndarray:
            return decode_blob((target / f"{name}.bin").read_bytes())[0]

        cache = EndpointCache(
            name=meta["name"],
            input_shape=tuple(meta["input_shape"]),
            layer_shapes=[tuple(s) for s in meta["layer_shapes"]],
        )
        cache.accum = AccumMV(
            read("accum_dy")[..., 0],
            read("accum_dx")[..., 0],
            read("accum_valid")[..., 0].astype(bool),
        )
        cache.last_update_frame = int(meta["last_update_frame"])
        if meta["seeded"]:
            cache.input_cache = FeatureMap(read("input"))
            cache.layer_caches = [
                FeatureMap(read(f"layer_{index:02d}")) for index in range(len(cache.layer_shapes))
            ]
        cache.held_masks = [
            RecomputeMask(read(f"held_{index:02d}")[..., 0].astype(bool))
            for index in range(int(meta.get("held_masks", 0)))
        ]
        return cache

    def delete(self, key: str) -> None:
        target = self._dir(key)
        if target.exists():
            shutil.rmtree(target)

    def exists(self, key: str) -> bool:
        return (self._dir(key) / "meta.json").exists()

    def list_keys(self, prefix: str = "") -> List[str]:
        return sorted(
            p.name for p in self.root.iterdir()
            if p.is_dir() and p.name.startswith(prefix) and (p / "meta.json").exists()
        )

    def count(self) -> int:
        return len(self.list_keys())
