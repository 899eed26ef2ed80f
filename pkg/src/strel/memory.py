"""Long-range memory of pooled person vectors keyed by (video, timestamp)."""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import PersonFeature
from .tensor import Tensor, load_arrays, save_arrays

STRATEGIES = ("A", "B", "C")


class MemoryBank:
    """Detached per-person vectors; reads return neighbours within a timestamp window."""

    def __init__(self, window_size: int = 4, capacity: int | None = None):
        if window_size < 0:
            raise ValueError("window_size must be >= 0")
        self.window_size = window_size
        # max timestamps kept per video; oldest-written evicted first
        self.capacity = capacity
        self._videos: dict[str, OrderedDict[int, np.ndarray]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._videos.values())

    def num_vectors(self) -> int:
        return sum(a.shape[0] for v in self._videos.values() for a in v.values())

    def keys(self) -> list[tuple[str, int]]:
        return sorted((vid, t) for vid, ents in self._videos.items() for t in ents)

    def get(self, video_id: str, t: int) -> np.ndarray | None:
        return self._videos.get(video_id, {}).get(t)

    def clear(self) -> None:
        self._videos.clear()

    def write(self, video_id: str, t: int, person_vectors) -> None:
        vecs = person_vectors.data if isinstance(person_vectors, Tensor) else person_vectors
        vecs = np.array(vecs, dtype=np.float64, copy=True)
        if vecs.ndim != 2:
            raise ValueError(f"expected persons x C' vectors, got shape {vecs.shape}")
        vecs.setflags(write=False)
        entries = self._videos.setdefault(video_id, OrderedDict())
        entries.pop(int(t), None)
        entries[int(t)] = vecs
        if self.capacity is not None:
            while len(entries) > self.capacity:
                entries.popitem(last=False)

    def read_window(self, video_id: str, t: int, window: int | None = None) -> np.ndarray:
        """Vectors at timestamps in [t-W, t+W] except t, ordered by timestamp then person."""
        w = self.window_size if window is None else window
        if w < 0:
            raise ValueError("window must be >= 0")
        entries = self._videos.get(video_id)
        if not entries:
            return np.zeros((0, 0))
        picked = [entries[s] for s in sorted(entries) if s != t and abs(s - t) <= w]
        if not picked:
            return np.zeros((0, 0))
        return np.concatenate(picked, axis=0)

    def save(self, root) -> None:
        """One file per video holding ``t<timestamp>`` -> persons x C' arrays."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for old in root.glob("*.bank"):
            old.unlink()
        for vid, entries in sorted(self._videos.items()):
            save_arrays(root / f"{vid}.bank", {f"t{t:08d}": v for t, v in entries.items()})

    @classmethod
    def load(cls, root, window_size: int = 4, capacity: int | None = None) -> "MemoryBank":
        bank = cls(window_size, capacity)
        for path in sorted(Path(root).glob("*.bank")):
            for name, arr in sorted(load_arrays(path).items()):
                bank.write(path.stem, int(name[1:]), arr)
        return bank

    def snapshot(self) -> dict[tuple[str, int], np.ndarray]:
        return {(vid, t): v for vid, ents in self._videos.items() for t, v in ents.items()}


def write(bank: MemoryBank, video_id: str, t: int, person_vectors) -> None:
    bank.write(video_id, t, person_vectors)


def read_window(bank: MemoryBank, video_id: str, t: int, window: int | None = None) -> np.ndarray:
    return bank.read_window(video_id, t, window)


def pooled_person_vector(person: PersonFeature | Tensor | np.ndarray) -> np.ndarray:
    """Global mean over (T', h, w) of one C' x T' x h x w person feature."""
    vals = person.values if isinstance(person, PersonFeature) else person
    arr = vals.data if isinstance(vals, Tensor) else np.asarray(vals)
    return arr.mean(axis=(1, 2, 3))


def extract_and_store_all(bank: MemoryBank, model, clips: Sequence, batch_size: int = 16,
                          domains: Iterable[str] | None = None) -> int:
    """One inference pass writing pooled person vectors for every clip; returns vectors written."""
    keep = None if domains is None else set(domains)
    todo = [c for c in clips if keep is None or c.domain in keep]
    written = 0
    for i in range(0, len(todo), batch_size):
        chunk = todo[i:i + batch_size]
        frames = np.stack([c.frames for c in chunk])
        for clip, vecs in zip(chunk, model.pooled_vectors(frames, [c.boxes for c in chunk])):
            bank.write(clip.video_id, clip.timestamp, vecs)
            written += vecs.shape[0]
    return written
