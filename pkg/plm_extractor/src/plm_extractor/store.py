"""Writer for the embedding-store directory format consumed downstream.

    manifest.json   {"model":..., "mode":..., "prompts":[...], "dim": D,
                     "dtype": "f32"}
    entities.txt    one entity string per line; line number = entity index
    vectors.bin     magic "TYLREMB1", little-endian, u32 dim, u32 record
                    count, records of (u32 entity index, u8 prompt index,
                    dim * f32)

Records are written sorted by (entity index, prompt index) so a given set
of vectors always produces the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

STORE_MAGIC = b"TYLREMB1"


class StoreWriter:
    def __init__(self, model: str, mode: str, prompts: list[str], dim: int) -> None:
        self.model = model
        self.mode = mode
        self.prompts = list(prompts)
        self.dim = dim
        self.entities: list[str] = []
        self._entity_index: dict[str, int] = {}
        self.records: dict[tuple[int, int], np.ndarray] = {}

    def add(self, entity: str, prompt_idx: int, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise ValueError(f"vector for {entity!r} prompt {prompt_idx} has shape {vector.shape}, want ({self.dim},)")
        if not 0 <= prompt_idx < len(self.prompts):
            raise ValueError(f"prompt index {prompt_idx} out of range")
        idx = self._entity_index.get(entity)
        if idx is None:
            idx = len(self.entities)
            self._entity_index[entity] = idx
            self.entities.append(entity)
        self.records[(idx, prompt_idx)] = vector

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"model": self.model, "mode": self.mode, "prompts": self.prompts,
                    "dim": self.dim, "dtype": "f32"}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        with open(directory / "entities.txt", "w", encoding="utf-8") as f:
            for name in self.entities:
                f.write(name + "\n")
        with open(directory / "vectors.bin", "wb") as f:
            f.write(STORE_MAGIC)
            f.write(struct.pack("<II", self.dim, len(self.records)))
            for (ei, pi), vec in sorted(self.records.items()):
                f.write(struct.pack("<IB", ei, pi))
                f.write(vec.astype("<f4").tobytes())
