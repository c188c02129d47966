"""Ground-truth alignment of segments, prototype extraction, memory bank.

Alignment splits every K-Means segment along semantic class boundaries
so each resulting segment carries exactly one label; the off-class
fragments this creates act as hard negatives for the losses. Prototypes
are embedding-only mean directions (coordinates never enter them). The
bank is a FIFO of recent batches' prototypes, held as frozen constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from vmfseg import backend
from vmfseg.core import (
    DegenerateSumError,
    EmbeddingMap,
    LabelMap,
    Prototype,
    Segmentation,
    ShapeMismatchError,
    ZERO_NORM_EPS,
    _freeze,
)


@dataclass(frozen=True)
class AlignedSegmentation:
    """A segmentation refined so each segment holds a single semantic label.

    segment_labels[i] is the class of segment i; for a segment whose
    pixels were all unlabeled it is the ground truth's ignore value.
    source[i] is the id of the input segment it was carved from.
    """

    seg: Segmentation
    segment_labels: np.ndarray  # (num_segments,) int64
    source: np.ndarray  # (num_segments,) int64

    def __post_init__(self):
        object.__setattr__(self, "segment_labels", _freeze(np.asarray(self.segment_labels, dtype=np.int64)))
        object.__setattr__(self, "source", _freeze(np.asarray(self.source, dtype=np.int64)))
        if self.segment_labels.shape != (self.seg.num_segments,):
            raise ValueError("segment_labels must have one entry per segment")
        if self.source.shape != (self.seg.num_segments,):
            raise ValueError("source must have one entry per segment")


def _majority_per_segment(seg_flat: np.ndarray, classes_flat: np.ndarray,
                          num_segments: int, ignore_value: int) -> np.ndarray:
    """Majority class among each segment's labeled pixels; ties break low.

    Segments with no labeled pixel get ignore_value.
    """
    majority = np.full(num_segments, ignore_value, dtype=np.int64)
    labeled = classes_flat != ignore_value
    if not np.any(labeled):
        return majority
    seg_ids = seg_flat[labeled]
    cls = classes_flat[labeled]
    order = np.lexsort((cls, seg_ids))
    seg_sorted, cls_sorted = seg_ids[order], cls[order]
    # Runs of identical (segment, class) pairs -> per-pair counts.
    change = np.empty(seg_sorted.size, dtype=bool)
    change[0] = True
    change[1:] = (seg_sorted[1:] != seg_sorted[:-1]) | (cls_sorted[1:] != cls_sorted[:-1])
    starts = np.flatnonzero(change)
    counts = np.diff(np.append(starts, seg_sorted.size))
    pair_seg = seg_sorted[starts]
    pair_cls = cls_sorted[starts]
    # Within a segment, classes are ascending; stable sort by count keeps
    # the lowest class first among equal counts.
    best = {}
    for s, c, n in zip(pair_seg, pair_cls, counts):
        cur = best.get(s)
        if cur is None or n > cur[0]:
            best[s] = (n, c)
    for s, (_, c) in best.items():
        majority[s] = c
    return majority


def align(seg: Segmentation, gt: LabelMap, split_components: bool = False) -> AlignedSegmentation:
    """Split each segment by ground-truth class so segments are single-label.

    Every non-empty (segment x class) intersection becomes one output
    segment. Unlabeled (ignore) pixels inherit their segment's majority
    class so the output still covers the full image; they are excluded
    from prototype sums and losses downstream. With split_components,
    each intersection is further split into 4-connected components.
    """
    if (seg.height, seg.width) != (gt.height, gt.width):
        raise ShapeMismatchError(
            f"segmentation {seg.height}x{seg.width} vs label map {gt.height}x{gt.width}"
        )
    seg_flat = seg.flat()
    gt_flat = gt.flat()
    majority = _majority_per_segment(seg_flat, gt_flat, seg.num_segments, gt.ignore_value)

    effective = np.where(gt_flat == gt.ignore_value, majority[seg_flat], gt_flat)
    # Dense (segment, class) pair -> new id, ordered by (segment, class).
    pair_keys = seg_flat * (int(effective.max()) + 2) + effective
    _, new_flat = np.unique(pair_keys, return_inverse=True)
    new_labels = new_flat.reshape(seg.height, seg.width)

    if split_components:
        out = np.zeros_like(new_labels)
        next_id = 0
        for sid in range(int(new_labels.max()) + 1):
            mask = new_labels == sid
            comp, n = ndimage.label(mask)  # 4-connectivity by default
            out[mask] = comp[mask] + next_id - 1
            next_id += n
        new_labels = out

    aligned = Segmentation.from_labels(new_labels)
    flat_ids = aligned.flat()
    first = np.full(aligned.num_segments, flat_ids.size, dtype=np.int64)
    np.minimum.at(first, flat_ids, np.arange(flat_ids.size))
    seg_labels = effective[first]
    source = seg_flat[first]
    return AlignedSegmentation(seg=aligned, segment_labels=seg_labels, source=source)


def prototypes(
    emb: EmbeddingMap,
    seg: Segmentation,
    gt: Optional[LabelMap] = None,
    image_id: int = 0,
) -> list[Prototype]:
    """Embedding-only mean-direction prototype of each segment.

    With a label map, only pixels carrying the segment's majority class
    contribute, the prototype is labeled with that class, and unlabeled
    pixels never contribute; a segment with no contributing pixels yields
    no prototype (its segment_id is simply absent from the result).
    """
    if (seg.height, seg.width) != (emb.height, emb.width):
        raise ShapeMismatchError(
            f"segmentation {seg.height}x{seg.width} vs embeddings {emb.height}x{emb.width}"
        )
    vectors = np.ascontiguousarray(emb.flat())
    seg_flat = seg.flat()

    if gt is None:
        keep = np.ones(seg_flat.size, dtype=bool)
        labels_for = np.full(seg.num_segments, -1, dtype=np.int64)
    else:
        if (gt.height, gt.width) != (emb.height, emb.width):
            raise ShapeMismatchError(
                f"label map {gt.height}x{gt.width} vs embeddings {emb.height}x{emb.width}"
            )
        gt_flat = gt.flat()
        labels_for = _majority_per_segment(seg_flat, gt_flat, seg.num_segments, gt.ignore_value)
        keep = (gt_flat != gt.ignore_value) & (gt_flat == labels_for[seg_flat])

    sums, counts = backend.segment_sums(
        np.ascontiguousarray(vectors[keep]), seg_flat[keep], seg.num_segments
    )
    out: list[Prototype] = []
    for sid in range(seg.num_segments):
        if counts[sid] == 0:
            continue
        norm = float(np.linalg.norm(sums[sid]))
        if norm < ZERO_NORM_EPS:
            raise DegenerateSumError(
                f"segment {sid} embedding sum cancelled (norm {norm:.3e})"
            )
        out.append(
            Prototype(
                vector=sums[sid] / norm,
                image_id=image_id,
                segment_id=sid,
                semantic_label=None if gt is None else int(labels_for[sid]),
                pixel_count=int(counts[sid]),
            )
        )
    return out


@dataclass(frozen=True)
class PrototypeBank:
    """FIFO cache of the last `depth` batches' prototypes.

    Bank prototypes are constants: they join loss denominators and
    positive sets but never receive gradients.
    """

    depth: int
    entries: tuple[tuple[Prototype, ...], ...] = ()

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("bank depth must be >= 0")
        if len(self.entries) > self.depth:
            raise ValueError("bank holds more batches than its depth")

    def all_prototypes(self) -> tuple[Prototype, ...]:
        """All cached prototypes, oldest batch first."""
        return tuple(p for batch in self.entries for p in batch)

    def __len__(self) -> int:
        return len(self.entries)


def bank_push(bank: PrototypeBank, batch: Sequence[Prototype]) -> PrototypeBank:
    """Append one batch of prototypes, evicting the oldest beyond depth."""
    if bank.depth == 0:
        return bank
    entries = bank.entries + (tuple(batch),)
    if len(entries) > bank.depth:
        entries = entries[-bank.depth :]
    return PrototypeBank(depth=bank.depth, entries=entries)
