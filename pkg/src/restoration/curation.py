"""Portrait curation: candidate and eye-distance filters, identity pairs, triplets and splits"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, TypeVar

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, field_validator
from tqdm import tqdm

from .degrade import DegradeConfig, degrade
from .geometry import FaceTemplate, align_face, landmark_box
from .identity import embed_identities
from .imaging import load_image, save_image
from .manifest import FaceTriplet, PortraitRecord
from .types import Embedder, RowResult, ShapeError

REFERENCE_RESOLUTION = 3840
REFERENCE_EYE_DISTANCE = 64.0

T = TypeVar("T")
U = TypeVar("U")


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    size: int = 128
    num_portraits: int = 120
    scenes_per_identity: int = 3
    num_faces: int = 40
    num_scenes: int = 40
    min_eye_distance: Optional[float] = None
    min_long_side: Optional[int] = None
    aspect_range: Tuple[float, float] = (0.6, 1.6)
    gamma: float = 0.65
    test_fraction: float = 0.1
    mask_dilation: float = 0.1
    face_side: int = 128
    workers: int = 1

    @field_validator("gamma")
    @classmethod
    def _check_gamma(cls, v: float) -> float:
        if not -1.0 < v < 1.0:
            raise ValueError("gamma must lie in (-1, 1)")
        return v

    @field_validator("test_fraction")
    @classmethod
    def _check_fraction(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        return v

    def eye_threshold(self) -> float:
        if self.min_eye_distance is not None:
            return self.min_eye_distance
        return default_min_eye_distance(self.size)

    def long_side_threshold(self) -> int:
        if self.min_long_side is not None:
            return self.min_long_side
        return self.size


class Pair(NamedTuple):
    query: str
    partner: str
    similarity: float


@dataclass
class EmbeddedFace:
    id: str
    embedding: np.ndarray


@dataclass
class CurationResult:
    train: List[FaceTriplet] = field(default_factory=list)
    test: List[FaceTriplet] = field(default_factory=list)
    pairs: List[Pair] = field(default_factory=list)
    kept: int = 0
    dropped_candidates: int = 0
    dropped_small_faces: int = 0


def derive_seed(seed: int, *keys: object) -> int:
    """Stable 63-bit seed from a global seed and any keys"""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for key in keys:
        h.update(b"\x00" + str(key).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFFFFFFFFFFFFFF


def default_min_eye_distance(size: int) -> float:
    """64 px at 4K, scaled to the working resolution"""
    return REFERENCE_EYE_DISTANCE * size / REFERENCE_RESOLUTION


def parallel_map(fn: Callable[[T], U], items: Sequence[T], workers: int, desc: str) -> List[U]:
    """Order-preserving map; single-threaded when workers <= 1"""
    if workers <= 1:
        return [fn(item) for item in tqdm(items, desc=desc, leave=False)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, leave=False))


# ---------------------------------------------------------------------------
# Filters and splitting
# ---------------------------------------------------------------------------


def candidate_filter(
    records: Iterable[PortraitRecord],
    aspect_range: Tuple[float, float] = (0.6, 1.6),
    min_long_side: int = 0,
) -> List[PortraitRecord]:
    """Keep images with width/height inside `aspect_range` and a long enough long side"""
    lo, hi = aspect_range
    return [
        r
        for r in records
        if lo <= r.width / r.height <= hi and max(r.width, r.height) >= min_long_side
    ]


def filter_portraits(
    records: Iterable[PortraitRecord], min_eye_dist: float
) -> List[PortraitRecord]:
    """Drop images with no face or with eyes closer than `min_eye_dist` pixels"""
    return [r for r in records if r.landmarks is not None and r.eye_distance >= min_eye_dist]


def assign_split(record_id: str, test_fraction: float, seed: int) -> str:
    u = derive_seed(seed, "split", record_id) / float(0x7FFFFFFFFFFFFFFF)
    return "test" if u < test_fraction else "train"


# ---------------------------------------------------------------------------
# Identity pairs
# ---------------------------------------------------------------------------


def cosine_matrix(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("Zero-norm embedding in pair construction")
    unit = e / norms
    return np.clip(unit @ unit.T, -1.0, 1.0)


def pairs_from_similarity(ids: Sequence[str], sim: np.ndarray, gamma: float) -> List[Pair]:
    """All ordered pairs (x, y), x != y, with sim[x, y] > gamma"""
    sim = np.asarray(sim, dtype=np.float64)
    n = len(ids)
    if sim.shape != (n, n):
        raise ShapeError(f"Similarity matrix {sim.shape} does not match {n} faces")
    above = sim > gamma
    np.fill_diagonal(above, False)
    rows, cols = np.nonzero(above)
    return [Pair(ids[i], ids[j], float(sim[i, j])) for i, j in zip(rows, cols)]


def build_pairs(faces: Sequence[EmbeddedFace], gamma: float = 0.65) -> List[Pair]:
    if not faces:
        return []
    sim = cosine_matrix(np.stack([f.embedding for f in faces]))
    # symmetrize so membership is symmetric under rounding
    sim = 0.5 * (sim + sim.T)
    return pairs_from_similarity([f.id for f in faces], sim, gamma)


def partners_by_query(pairs: Iterable[Pair]) -> Dict[str, List[Pair]]:
    out: Dict[str, List[Pair]] = {}
    for p in pairs:
        out.setdefault(p.query, []).append(p)
    for v in out.values():
        v.sort(key=lambda p: p.partner)
    return out


def assign_test_refs(
    test_ids: Sequence[str], pairs: Iterable[Pair]
) -> Dict[str, Optional[str]]:
    """Most similar partner per face; ties go to the lowest partner id"""
    partners = partners_by_query(pairs)
    out: Dict[str, Optional[str]] = {}
    for fid in test_ids:
        best: Optional[Pair] = None
        for p in partners.get(fid, []):
            if best is None or p.similarity > best.similarity:
                best = p
        out[fid] = best.partner if best is not None else None
    return out


# ---------------------------------------------------------------------------
# Triplets
# ---------------------------------------------------------------------------


def lq_path_for(record: PortraitRecord) -> str:
    return f"lq/{record.id}.png"


def ref_path_for(record_id: str) -> str:
    return f"faces/{record_id}.png"


def mask_box_for(
    record: PortraitRecord, factor: int, dilation: float
) -> Optional[Tuple[int, int, int, int]]:
    """Landmark box dilated by `dilation`, on the LQ grid"""
    if record.landmarks is None:
        return None
    return landmark_box(
        record.landmarks,
        dilation,
        record.width // factor,
        record.height // factor,
        scale=1.0 / factor,
    )


def _triplet(
    record: PortraitRecord,
    factor: int,
    seed: int,
    split: str,
    ref_id: Optional[str] = None,
    mask_box: Optional[Tuple[int, int, int, int]] = None,
) -> FaceTriplet:
    suffix = f"ref-{ref_id}" if ref_id is not None else "noref"
    return FaceTriplet(
        id=f"{record.id}__{suffix}",
        portrait_id=record.id,
        lq=lq_path_for(record),
        hq=record.image,
        ref=ref_path_for(ref_id) if ref_id is not None else None,
        ref_id=ref_id,
        mask_box=mask_box if ref_id is not None else None,
        landmarks=record.landmarks,
        degrade_seed=derive_seed(seed, "degrade", record.id),
        factor=factor,
        source=record.source,
        split=split,
    )


def build_triplets(
    portraits: Sequence[PortraitRecord],
    pairs: Iterable[Pair],
    degrade_cfg: DegradeConfig,
    seed: int,
    mask_dilation: float = 0.1,
    split: str = "train",
) -> List[FaceTriplet]:
    """One triplet per (portrait, partner) pair plus one reference-free triplet per portrait"""
    factor = degrade_cfg.downscale_factor
    partners = partners_by_query(pairs)
    out: List[FaceTriplet] = []
    for record in portraits:
        box = mask_box_for(record, factor, mask_dilation)
        if box is not None:
            for p in partners.get(record.id, []):
                out.append(_triplet(record, factor, seed, split, p.partner, box))
        out.append(_triplet(record, factor, seed, split))
    return sorted(out, key=lambda t: t.id)


def build_test_triplets(
    portraits: Sequence[PortraitRecord],
    refs: Dict[str, Optional[str]],
    degrade_cfg: DegradeConfig,
    seed: int,
    mask_dilation: float = 0.1,
) -> List[FaceTriplet]:
    """One triplet per test portrait carrying its assigned reference, if any"""
    factor = degrade_cfg.downscale_factor
    out = []
    for record in portraits:
        ref_id = refs.get(record.id)
        box = mask_box_for(record, factor, mask_dilation) if ref_id is not None else None
        out.append(_triplet(record, factor, seed, "test", ref_id if box else None, box))
    return sorted(out, key=lambda t: t.id)


def triplets_for_unpaired(
    records: Sequence[PortraitRecord], degrade_cfg: DegradeConfig, seed: int
) -> List[FaceTriplet]:
    """Reference-free rows for face crops and face-free scenes"""
    factor = degrade_cfg.downscale_factor
    return sorted(
        (_triplet(r, factor, seed, r.split) for r in records), key=lambda t: t.id
    )


# ---------------------------------------------------------------------------
# Materialization
# ---------------------------------------------------------------------------


def make_lq(hq: torch.Tensor, degrade_cfg: DegradeConfig, degrade_seed: int) -> torch.Tensor:
    return degrade(hq, degrade_cfg, degrade_seed)


def materialize_lq(
    triplets: Sequence[FaceTriplet],
    root: Path,
    degrade_cfg: DegradeConfig,
    workers: int = 1,
) -> List[RowResult]:
    """Write every distinct LQ image once; a pure function of (hq, degrade seed)"""
    jobs: Dict[str, FaceTriplet] = {}
    for t in triplets:
        jobs.setdefault(t.lq, t)

    def run(t: FaceTriplet) -> RowResult:
        try:
            hq = load_image(root / t.hq)
            lq = make_lq(hq, degrade_cfg, t.degrade_seed)
            save_image(lq, root / t.lq)
            return RowResult(row_id=t.portrait_id, success=True)
        except (OSError, ShapeError) as e:
            return RowResult(row_id=t.portrait_id, success=False, error=str(e))

    results = parallel_map(run, [jobs[k] for k in sorted(jobs)], workers, "degrade")
    failed = [r for r in results if not r.success]
    if failed:
        logger.warning(f"{len(failed)} LQ images could not be produced")
    return results


def embed_faces(
    records: Sequence[PortraitRecord],
    root: Path,
    template: FaceTemplate,
    embedder: Embedder,
    write_crops: bool = True,
    workers: int = 1,
) -> List[EmbeddedFace]:
    """Align, optionally store and embed the face of every record"""

    def crop(record: PortraitRecord) -> torch.Tensor:
        img = load_image(root / record.image).double()
        face = align_face(img, record.landmarks, template).float().clamp(0.0, 1.0)
        if write_crops:
            save_image(face, root / ref_path_for(record.id))
        return face

    faces = parallel_map(crop, list(records), workers, "align")
    if not faces:
        return []
    embedded = embed_identities(torch.stack(faces).double(), embedder)
    return [EmbeddedFace(id=r.id, embedding=e.as_array()) for r, e in zip(records, embedded)]


def curate(
    records: Sequence[PortraitRecord],
    root: Path,
    cfg: DataConfig,
    degrade_cfg: DegradeConfig,
    embedder: Embedder,
    seed: int,
) -> CurationResult:
    """Filter, split, pair and build the train/test triplet sets"""
    result = CurationResult()
    portraits = [r for r in records if r.source == "portrait"]
    others = [r for r in records if r.source != "portrait"]

    candidates = candidate_filter(portraits, cfg.aspect_range, cfg.long_side_threshold())
    result.dropped_candidates = len(portraits) - len(candidates)
    kept = filter_portraits(candidates, cfg.eye_threshold())
    result.dropped_small_faces = len(candidates) - len(kept)
    result.kept = len(kept)
    logger.info(
        f"Kept {len(kept)} of {len(portraits)} portraits "
        f"({result.dropped_candidates} candidates rejected, "
        f"{result.dropped_small_faces} faces too small)"
    )

    kept = [
        r.model_copy(update={"split": assign_split(r.id, cfg.test_fraction, seed)}) for r in kept
    ]
    template = FaceTemplate.arcface(cfg.face_side)
    embedded = {f.id: f for f in embed_faces(kept, root, template, embedder, workers=cfg.workers)}

    for split in ("train", "test"):
        members = [r for r in kept if r.split == split]
        pairs = build_pairs([embedded[r.id] for r in members], cfg.gamma)
        result.pairs.extend(pairs)
        logger.info(f"{split}: {len(members)} portraits, {len(pairs)} identity pairs")
        if split == "train":
            result.train = build_triplets(members, pairs, degrade_cfg, seed, cfg.mask_dilation)
        else:
            refs = assign_test_refs([r.id for r in members], pairs)
            result.test = build_test_triplets(
                members, refs, degrade_cfg, seed, cfg.mask_dilation
            )

    extra = [r.model_copy(update={"split": "train"}) for r in others]
    result.train = sorted(
        result.train + triplets_for_unpaired(extra, degrade_cfg, seed), key=lambda t: t.id
    )
    return result
