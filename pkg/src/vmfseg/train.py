"""Two-stage EM training over a toy differentiable embedder.

Each step embeds a mini-batch of scenes, segments every image
(spherical K-Means refined by ground truth when supervised, or a
provided oversegmentation otherwise), computes segment prototypes,
scores all pixels against the pooled batch-plus-bank prototypes, and
descends the embedder parameters through the normalization. Synthetic
scenes provide a deterministic, linearly separable desk-scale dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from vmfseg.align import PrototypeBank, align, bank_push, prototypes
from vmfseg.core import (
    EmbeddingMap,
    LabelMap,
    Prototype,
    Segmentation,
    TrainConfig,
    ZeroVectorError,
    ZERO_NORM_EPS,
    _freeze,
)
from vmfseg.kmeans import spherical_kmeans
from vmfseg.loss import LossBatch, vmf_loss, vmfn_loss
from vmfseg.retrieval import PrototypeStore

SIGNAL_SIGMA = 0.05  # per-class noise on informative channels
DISTRACTOR_SIGMA = 0.3  # pure-noise channels
MIN_CLASS_GAP = 0.4  # >= 4 * SIGNAL_SIGMA with margin
NUM_FEATURES = 6  # 3 color + 2 noise + 1 texture
_SIGNAL_DIMS = (0, 1, 2, 5)
_NOISE_DIMS = (3, 4)


@dataclass(frozen=True)
class ToyEmbedder:
    """Linear (optionally one-hidden-layer) map into unit-sphere embeddings.

    Output for raw feature x is normalize(W x + b); with a hidden layer,
    normalize(W2 tanh(W1 x + b1) + b2).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "w1", _freeze(np.asarray(self.w1, dtype=np.float64)))
        object.__setattr__(self, "b1", _freeze(np.asarray(self.b1, dtype=np.float64)))
        if (self.w2 is None) != (self.b2 is None):
            raise ValueError("hidden layer needs both w2 and b2")
        if self.w2 is not None:
            object.__setattr__(self, "w2", _freeze(np.asarray(self.w2, dtype=np.float64)))
            object.__setattr__(self, "b2", _freeze(np.asarray(self.b2, dtype=np.float64)))

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.w1.shape[1] if self.w2 is None else self.w2.shape[1]

    def forward(self, x: np.ndarray):
        """Embed raw feature rows; returns (v, cache) with v unit rows."""
        x = np.asarray(x, dtype=np.float64)
        if self.w2 is None:
            u = x @ self.w1 + self.b1
            hidden = None
        else:
            hidden = np.tanh(x @ self.w1 + self.b1)
            u = hidden @ self.w2 + self.b2
        norms = np.linalg.norm(u, axis=1, keepdims=True)
        if np.any(norms < ZERO_NORM_EPS):
            raise ZeroVectorError("embedder produced a (near-)zero pre-normalization vector")
        v = u / norms
        return v, (x, hidden, v, norms)

    def backward(self, cache, grad_v: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for d(loss)/d(v) given a forward cache."""
        x, hidden, v, norms = cache
        # Through the normalization: (I - v v^T) / ||u||.
        du = (grad_v - np.sum(grad_v * v, axis=1, keepdims=True) * v) / norms
        if self.w2 is None:
            return {"w1": x.T @ du, "b1": du.sum(axis=0)}
        grads = {"w2": hidden.T @ du, "b2": du.sum(axis=0)}
        dh = (du @ self.w2.T) * (1.0 - hidden * hidden)
        grads["w1"] = x.T @ dh
        grads["b1"] = dh.sum(axis=0)
        return grads

    def step(self, grads: dict[str, np.ndarray], learning_rate: float) -> "ToyEmbedder":
        """One plain-SGD update; returns the updated embedder."""
        fields = {"w1": self.w1 - learning_rate * grads["w1"], "b1": self.b1 - learning_rate * grads["b1"]}
        if self.w2 is not None:
            fields["w2"] = self.w2 - learning_rate * grads["w2"]
            fields["b2"] = self.b2 - learning_rate * grads["b2"]
        return replace(self, **fields)

    def embed(self, image: np.ndarray) -> EmbeddingMap:
        """Embed an (H, W, f_in) raw-feature image."""
        image = np.asarray(image, dtype=np.float64)
        h, w, _ = image.shape
        v, _ = self.forward(image.reshape(h * w, -1))
        return EmbeddingMap(v.reshape(h, w, -1))


def init_embedder(cfg: TrainConfig, feature_dim: int) -> ToyEmbedder:
    rng = np.random.default_rng([cfg.seed, 2])
    if cfg.hidden_dim == 0:
        return ToyEmbedder(
            w1=rng.normal(0.0, 0.5, size=(feature_dim, cfg.embedding_dim)),
            b1=np.zeros(cfg.embedding_dim),
        )
    return ToyEmbedder(
        w1=rng.normal(0.0, 0.5, size=(feature_dim, cfg.hidden_dim)),
        b1=np.zeros(cfg.hidden_dim),
        w2=rng.normal(0.0, 0.5, size=(cfg.hidden_dim, cfg.embedding_dim)),
        b2=np.zeros(cfg.embedding_dim),
    )


@dataclass(frozen=True)
class ShapeSpec:
    class_id: int
    kind: str  # "rect" | "disk"
    params: tuple[int, ...]  # rect: (r0, c0, h, w); disk: (r, c, radius)


@dataclass(frozen=True)
class SyntheticScene:
    """Raw feature image plus its ground truth and generating geometry."""

    image: np.ndarray  # (H, W, NUM_FEATURES) float64
    gt: Optional[LabelMap]
    spec: tuple[ShapeSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "image", _freeze(np.asarray(self.image, dtype=np.float64)))
        object.__setattr__(self, "spec", tuple(self.spec))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _class_bases(classes: int, seed: int) -> np.ndarray:
    """Per-class mean signal features, pairwise separated by MIN_CLASS_GAP."""
    rng = np.random.default_rng([seed, 0])
    bases: list[np.ndarray] = []
    attempts = 0
    while len(bases) < classes:
        cand = rng.uniform(0.1, 0.9, size=len(_SIGNAL_DIMS))
        if all(np.linalg.norm(cand - b) >= MIN_CLASS_GAP for b in bases):
            bases.append(cand)
        attempts += 1
        if attempts > 100_000:
            raise ValueError(f"cannot place {classes} class centers with gap {MIN_CLASS_GAP}")
    return np.stack(bases)


def _render_scene(size: int, classes: int, bases: np.ndarray, rng: np.random.Generator) -> SyntheticScene:
    gt = np.zeros((size, size), dtype=np.int64)
    shapes: list[ShapeSpec] = []
    for _ in range(int(rng.integers(1, 5))):
        class_id = int(rng.integers(1, classes))
        if rng.integers(2) == 0:
            h = int(rng.integers(size // 5, size // 2))
            w = int(rng.integers(size // 5, size // 2))
            r0 = int(rng.integers(0, size - h))
            c0 = int(rng.integers(0, size - w))
            gt[r0 : r0 + h, c0 : c0 + w] = class_id
            shapes.append(ShapeSpec(class_id=class_id, kind="rect", params=(r0, c0, h, w)))
        else:
            radius = int(rng.integers(size // 6, size // 3))
            r = int(rng.integers(radius, size - radius))
            c = int(rng.integers(radius, size - radius))
            rr, cc = np.ogrid[:size, :size]
            gt[(rr - r) ** 2 + (cc - c) ** 2 <= radius * radius] = class_id
            shapes.append(ShapeSpec(class_id=class_id, kind="disk", params=(r, c, radius)))

    image = np.empty((size, size, NUM_FEATURES), dtype=np.float64)
    signal = bases[gt]  # (H, W, len(_SIGNAL_DIMS))
    for slot, dim in enumerate(_SIGNAL_DIMS):
        image[:, :, dim] = signal[:, :, slot] + rng.normal(0.0, SIGNAL_SIGMA, size=(size, size))
    for dim in _NOISE_DIMS:
        image[:, :, dim] = rng.normal(0.0, DISTRACTOR_SIGMA, size=(size, size))
    return SyntheticScene(image=image, gt=LabelMap(labels=gt), spec=tuple(shapes))


def make_dataset(
    num_images: int, classes: int, size: int, seed: int, start_index: int = 0
) -> list[SyntheticScene]:
    """Deterministic synthetic scenes: foreground shapes on background class 0.

    Class feature centers depend only on (classes, seed), so scenes
    generated with different start_index values (e.g. held-out splits)
    share the same class definitions.
    """
    if classes < 2:
        raise ValueError(f"need >= 2 classes, got {classes}")
    if size < 16:
        raise ValueError(f"need size >= 16, got {size}")
    bases = _class_bases(classes, seed)
    return [
        _render_scene(size, classes, bases, np.random.default_rng([seed, 1, start_index + i]))
        for i in range(num_images)
    ]


def _pool_batch(
    model: ToyEmbedder,
    batch: Sequence[SyntheticScene],
    bank: PrototypeBank,
    cfg: TrainConfig,
    supervised: bool,
    oversegs: Optional[Sequence[Segmentation]],
    image_ids: Sequence[int],
):
    """Embed a batch and assemble the pooled loss inputs.

    Returns (caches, pixel_rows, loss_batch, batch_protos) where
    pixel_rows[i] are the flat pixel indices of image i that entered the
    loss, in pixel order.
    """
    if not supervised and oversegs is None:
        raise ValueError("unsupervised training needs per-image oversegmentations")

    caches = []
    per_image: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []  # (vectors, own table, pixel rows)
    batch_protos: list[Prototype] = []

    for pos, scene in enumerate(batch):
        h, w = scene.height, scene.width
        v, cache = model.forward(scene.image.reshape(h * w, -1))
        caches.append(cache)
        emb = EmbeddingMap(v.reshape(h, w, -1))
        if supervised:
            if scene.gt is None:
                raise ValueError("supervised training needs ground truth labels")
            seg = align(spherical_kmeans(emb, cfg), scene.gt).seg
            protos = prototypes(emb, seg, scene.gt, image_id=image_ids[pos])
            keep = ~scene.gt.ignore_mask().reshape(-1)
        else:
            seg = oversegs[pos]
            if (seg.height, seg.width) != (h, w):
                raise ValueError("oversegmentation shape must match the image")
            protos = prototypes(emb, seg, image_id=image_ids[pos])
            keep = np.ones(h * w, dtype=bool)

        # Segment id -> pooled prototype index (-1 for prototype-less segments).
        seg_to_pool = np.full(seg.num_segments, -1, dtype=np.int64)
        for p in protos:
            seg_to_pool[p.segment_id] = len(batch_protos)
            batch_protos.append(p)
        rows = np.flatnonzero(keep)
        per_image.append((v, seg_to_pool[seg.flat()], rows))

    bank_protos = bank.all_prototypes()
    all_protos = batch_protos + list(bank_protos)
    matrix = np.stack([p.vector for p in all_protos]) if all_protos else np.zeros((0, model.embedding_dim))
    labels = np.array(
        [-1 if p.semantic_label is None else p.semantic_label for p in all_protos], dtype=np.int64
    )
    by_label: dict[int, np.ndarray] = {}
    for lab in np.unique(labels[labels >= 0]):
        by_label[int(lab)] = np.flatnonzero(labels == lab)

    empty = np.empty(0, dtype=np.int64)
    positives_for: list[np.ndarray] = []
    for o, lab in enumerate(labels[: len(batch_protos)]):
        if lab < 0:
            positives_for.append(empty)
        else:
            same = by_label[int(lab)]
            positives_for.append(same[same != o])

    vectors_list, own_list, positives_list, pixel_rows = [], [], [], []
    for v, own_table, rows in per_image:
        own_ids = own_table[rows]
        valid = own_ids >= 0  # segments with no prototype contribute no pixels
        rows = rows[valid]
        own_ids = own_ids[valid]
        vectors_list.append(v[rows])
        own_list.append(own_ids)
        pixel_rows.append(rows)
        positives_list.extend(map(positives_for.__getitem__, own_ids.tolist()))

    loss_batch = LossBatch(
        vectors=np.concatenate(vectors_list) if vectors_list else np.zeros((0, model.embedding_dim)),
        own=np.concatenate(own_list) if own_list else np.zeros(0, dtype=np.int64),
        positives=tuple(positives_list),
        prototypes=matrix,
        kappa=cfg.kappa,
    )
    return caches, pixel_rows, loss_batch, batch_protos


def train_step(
    model: ToyEmbedder,
    batch: Sequence[SyntheticScene],
    bank: PrototypeBank,
    cfg: TrainConfig,
    supervised: bool,
    oversegs: Optional[Sequence[Segmentation]] = None,
    image_ids: Optional[Sequence[int]] = None,
) -> tuple[ToyEmbedder, PrototypeBank, float]:
    """One optimization step; returns (updated model, updated bank, loss)."""
    if not batch:
        raise ValueError("batch must be non-empty")
    if image_ids is None:
        image_ids = list(range(len(batch)))
    caches, pixel_rows, loss_batch, batch_protos = _pool_batch(
        model, batch, bank, cfg, supervised, oversegs, image_ids
    )
    out = vmfn_loss(loss_batch) if supervised else vmf_loss(loss_batch)

    grads: Optional[dict[str, np.ndarray]] = None
    offset = 0
    for cache, rows in zip(caches, pixel_rows):
        n_pix = cache[2].shape[0]
        grad_v = np.zeros((n_pix, model.embedding_dim))
        grad_v[rows] = out.grad[offset : offset + rows.size]
        offset += rows.size
        g = model.backward(cache, grad_v)
        if grads is None:
            grads = g
        else:
            for key in grads:
                grads[key] = grads[key] + g[key]

    new_model = model.step(grads, cfg.learning_rate)
    new_bank = bank_push(bank, batch_protos)
    return new_model, new_bank, out.loss


def fit(
    dataset: Sequence[SyntheticScene],
    cfg: TrainConfig,
    supervised: bool,
    oversegs: Optional[Sequence[Segmentation]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> tuple[ToyEmbedder, PrototypeStore]:
    """Run cfg.iterations training steps, then build the prototype store.

    The store holds one majority-label prototype per training segment
    from a final pass with the trained embedder; when ground truth is
    absent (pure unsupervised data) the store is unlabeled and only
    suitable for discovery.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if not supervised and oversegs is not None and len(oversegs) != len(dataset):
        raise ValueError("need one oversegmentation per dataset image")

    model = init_embedder(cfg, dataset[0].image.shape[2])
    bank = PrototypeBank(depth=cfg.bank_depth)
    n = len(dataset)
    take = min(cfg.batch_size, n)
    for it in range(cfg.iterations):
        start = (it * take) % n
        ids = [(start + j) % n for j in range(take)]
        batch = [dataset[i] for i in ids]
        over = None if oversegs is None else [oversegs[i] for i in ids]
        model, bank, loss = train_step(
            model, batch, bank, cfg, supervised, oversegs=over, image_ids=ids
        )
        if on_step is not None:
            on_step(it, loss)

    store_protos: list[Prototype] = []
    for idx, scene in enumerate(dataset):
        emb = model.embed(scene.image)
        if supervised:
            seg = align(spherical_kmeans(emb, cfg), scene.gt).seg
        else:
            seg = oversegs[idx] if oversegs is not None else spherical_kmeans(emb, cfg)
        store_protos.extend(prototypes(emb, seg, scene.gt, image_id=idx))
    return model, PrototypeStore.from_prototypes(store_protos)
