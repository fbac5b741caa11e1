"""Named, counter-based random streams.

Every source of randomness in the pipeline draws from a stream owned by a
``StreamHub``. Streams are Philox generators keyed by (seed, stream name),
so the same name always yields the same sequence for a given seed, no matter
in which order streams are created. Stream states are serializable, which is
what makes checkpoint-resume bit-exact.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(seed: int, name: str) -> list[int]:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    # Philox wants a 2x64-bit key.
    return [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8)]


class StreamHub:
    """Factory and registry for named random streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            bitgen = np.random.Philox(key=_stream_key(self.seed, name))
            self._streams[name] = np.random.Generator(bitgen)
        return self._streams[name]

    def state(self) -> dict:
        """Snapshot of every stream touched so far (JSON-friendly)."""
        out = {"seed": self.seed, "streams": {}}
        for name, gen in self._streams.items():
            st = gen.bit_generator.state
            out["streams"][name] = {
                "counter": [int(v) for v in st["state"]["counter"]],
                "key": [int(v) for v in st["state"]["key"]],
                "buffer": [int(v) for v in st["buffer"]],
                "buffer_pos": int(st["buffer_pos"]),
                "has_uint32": int(st["has_uint32"]),
                "uinteger": int(st["uinteger"]),
            }
        return out

    def restore(self, snapshot: dict) -> None:
        self.seed = int(snapshot["seed"])
        self._streams.clear()
        for name, st in snapshot["streams"].items():
            bitgen = np.random.Philox(key=_stream_key(self.seed, name))
            full = bitgen.state
            full["state"]["counter"] = np.array(st["counter"], dtype=np.uint64)
            full["state"]["key"] = np.array(st["key"], dtype=np.uint64)
            full["buffer"] = np.array(st["buffer"], dtype=np.uint64)
            full["buffer_pos"] = st["buffer_pos"]
            full["has_uint32"] = st["has_uint32"]
            full["uinteger"] = st["uinteger"]
            bitgen.state = full
            self._streams[name] = np.random.Generator(bitgen)
