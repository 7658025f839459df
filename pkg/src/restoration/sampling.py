"""Seeded source mixing, reference dropout and batch loading"""

import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch

from .geometry import Landmarks5
from .imaging import box_mask, load_image
from .manifest import FaceTriplet
from .types import RangeError, ShapeError


def batch_rng(seed: int, step: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, step], dtype=np.uint64))
    )


def normalize_ratios(ratios: Sequence[float]) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise RangeError("At least one mixing ratio is required")
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise RangeError(f"Mixing ratios must be finite and non-negative: {list(ratios)}")
    total = r.sum()
    if total <= 0:
        raise RangeError("Mixing ratios must not all be zero")
    return r / total


def sample_batch(
    sources: Dict[str, Sequence[FaceTriplet]],
    ratios: Sequence[float],
    ref_drop_prob: float,
    batch: int,
    seed: int,
    step: int = 0,
) -> List[FaceTriplet]:
    """Draw `batch` triplets, picking sources in proportion to `ratios`.

    `ratios` follows the order of `sources`. Each referenced triplet drawn
    loses its reference and mask with probability `ref_drop_prob`. Returned
    triplets carry the name of the source they came from.
    """
    names = list(sources)
    if len(ratios) != len(names):
        raise RangeError(f"{len(ratios)} ratios for {len(names)} sources")
    p = normalize_ratios(ratios)
    if not 0.0 <= ref_drop_prob <= 1.0:
        raise RangeError(f"ref_drop_prob must lie in [0, 1], got {ref_drop_prob}")
    if batch < 1:
        raise RangeError(f"Batch size must be >= 1, got {batch}")
    for name, weight in zip(names, p):
        if weight > 0 and not sources[name]:
            raise RangeError(f"Source {name!r} has a positive ratio but no rows")

    rng = batch_rng(seed, step)
    picks = rng.choice(len(names), size=batch, p=p)
    out: List[FaceTriplet] = []
    for k in picks:
        rows = sources[names[int(k)]]
        row = rows[int(rng.integers(len(rows)))]
        drop = rng.random() < ref_drop_prob
        if row.ref is not None and drop:
            row = row.without_reference()
        out.append(row.model_copy(update={"source": names[int(k)]}))
    return out


def source_counts(batch: Sequence[FaceTriplet], names: Sequence[str]) -> Dict[str, int]:
    counts = {n: 0 for n in names}
    for t in batch:
        counts[t.source] = counts.get(t.source, 0) + 1
    return counts


@dataclass
class TripletBatch:
    lq: torch.Tensor
    hq: torch.Tensor
    ref: torch.Tensor
    ref_present: torch.Tensor
    mask: torch.Tensor
    landmarks: List[Optional[Landmarks5]]
    rows: List[FaceTriplet]

    def to(self, device: str, dtype: torch.dtype = torch.float32) -> "TripletBatch":
        return TripletBatch(
            lq=self.lq.to(device, dtype),
            hq=self.hq.to(device, dtype),
            ref=self.ref.to(device, dtype),
            ref_present=self.ref_present.to(device),
            mask=self.mask.to(device, dtype),
            landmarks=self.landmarks,
            rows=self.rows,
        )


class ImageCache:
    """Bounded LRU cache of decoded PNGs"""

    def __init__(self, root: Path, capacity: int = 512):
        self.root = Path(root)
        self.capacity = capacity
        self._items: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self._lock = threading.Lock()

    def get(self, rel: str) -> torch.Tensor:
        with self._lock:
            if rel in self._items:
                self._items.move_to_end(rel)
                return self._items[rel]
        img = load_image(self.root / rel)
        with self._lock:
            self._items[rel] = img
            if len(self._items) > self.capacity:
                self._items.popitem(last=False)
        return img


def load_batch(
    rows: Sequence[FaceTriplet], cache: ImageCache, face_side: int
) -> TripletBatch:
    lq, hq, ref, present, mask = [], [], [], [], []
    for row in rows:
        x_l = cache.get(row.lq)
        x_h = cache.get(row.hq)
        h, w = x_l.shape[-2:]
        if (h * row.factor, w * row.factor) != tuple(x_h.shape[-2:]):
            raise ShapeError(
                f"{row.id}: LQ {h}x{w} is not HQ {tuple(x_h.shape[-2:])} / {row.factor}"
            )
        lq.append(x_l)
        hq.append(x_h)
        if row.ref is not None:
            r = cache.get(row.ref)
            if tuple(r.shape[-2:]) != (face_side, face_side):
                raise ShapeError(f"{row.id}: reference face is not {face_side}x{face_side}")
            ref.append(r)
            present.append(True)
        else:
            ref.append(torch.zeros(3, face_side, face_side))
            present.append(False)
        mask.append(box_mask(h, w, row.mask_box))
    try:
        return TripletBatch(
            lq=torch.stack(lq),
            hq=torch.stack(hq),
            ref=torch.stack(ref),
            ref_present=torch.tensor(present, dtype=torch.bool),
            mask=torch.stack(mask),
            landmarks=[row.landmarks for row in rows],
            rows=list(rows),
        )
    except RuntimeError as e:
        raise ShapeError(f"Batch rows have different image sizes: {e}") from e


class BatchStream:
    """Per-step batches in step order; loading may run ahead on worker threads"""

    def __init__(
        self,
        sample_fn,
        cache: ImageCache,
        face_side: int,
        workers: int = 0,
        prefetch: int = 2,
    ):
        self.sample_fn = sample_fn
        self.cache = cache
        self.face_side = face_side
        self.workers = workers
        self.prefetch = prefetch

    def _load(self, step: int) -> TripletBatch:
        return load_batch(self.sample_fn(step), self.cache, self.face_side)

    def iterate(self, start: int, stop: int) -> Iterator[TripletBatch]:
        if self.workers <= 0:
            for step in range(start, stop):
                yield self._load(step)
            return
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            first = range(start, min(stop, start + self.prefetch))
            pending = [pool.submit(self._load, s) for s in first]
            nxt = start + len(pending)
            while pending:
                future = pending.pop(0)
                if nxt < stop:
                    pending.append(pool.submit(self._load, nxt))
                    nxt += 1
                yield future.result()
