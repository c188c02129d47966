"""Segment-sorting losses on the unit sphere and their analytic gradients.

Both losses score a pixel embedding against fixed segment prototypes
through concentration-scaled cosine softmaxes:

* vmf_loss: negative log posterior of the pixel's own segment against
  all prototypes. Needs no semantic labels.
* vmfn_loss: negative log total probability of selecting a same-class
  neighbor segment, with the pixel's own segment excluded from the
  denominator; pixels with no same-class neighbor fall back to the
  vmf term.

Prototypes are constants (no gradient flows into them). Returned
gradients are with respect to the mean loss and are projected onto the
sphere's tangent plane at each pixel, which is what a constrained
optimizer consumes and what perturb-then-renormalize finite differences
measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vmfseg.core import UNIT_TOL, _freeze


@dataclass(frozen=True)
class LossBatch:
    """Pixels, their segment memberships, and the prototype roster.

    vectors:    (N, d) unit pixel embeddings.
    own:        (N,) index of each pixel's own segment prototype.
    positives:  per pixel, indices of same-class prototypes excluding own
                (empty array = no same-class neighbor anywhere).
    prototypes: (K, d) unit vectors, current batch first, then bank.
    kappa:      concentration; scales every cosine inside the softmaxes.
    """

    vectors: np.ndarray
    own: np.ndarray
    positives: tuple[np.ndarray, ...]
    prototypes: np.ndarray
    kappa: float

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        protos = np.asarray(self.prototypes, dtype=np.float64)
        own = np.asarray(self.own, dtype=np.int64)
        if vectors.ndim != 2 or protos.ndim != 2 or vectors.shape[1] != protos.shape[1]:
            raise ValueError("vectors and prototypes must be 2-D with matching dim")
        if own.shape != (vectors.shape[0],):
            raise ValueError("own must hold one prototype index per pixel")
        if len(self.positives) != vectors.shape[0]:
            raise ValueError("positives must hold one index set per pixel")
        k = protos.shape[0]
        if own.size and (own.min() < 0 or own.max() >= k):
            raise ValueError("own segment index out of range")
        # Pixels of one segment typically share a positives array object;
        # validate each distinct (array, own) combination once.
        validated: dict[int, np.ndarray] = {}
        checked: set[tuple[int, int]] = set()
        positives = []
        for i, pos in enumerate(self.positives):
            key = id(pos)
            arr = validated.get(key)
            if arr is None:
                arr = np.asarray(pos, dtype=np.int64)
                if arr.size and (arr.min() < 0 or arr.max() >= k):
                    raise ValueError(f"positive index out of range for pixel {i}")
                arr = _freeze(arr)
                validated[key] = arr
            pair = (key, int(own[i]))
            if pair not in checked:
                checked.add(pair)
                if arr.size and np.any(arr == own[i]):
                    raise ValueError(f"positives of pixel {i} must exclude its own segment")
            positives.append(arr)
        for name, arr in (("vectors", vectors), ("prototypes", protos)):
            norms = np.linalg.norm(arr, axis=1)
            if arr.shape[0] and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
                raise ValueError(f"{name} must be unit norm within {UNIT_TOL}")
        if not self.kappa >= 0:
            raise ValueError("kappa must be non-negative")
        object.__setattr__(self, "vectors", _freeze(vectors))
        object.__setattr__(self, "own", _freeze(own))
        object.__setattr__(self, "positives", tuple(positives))
        object.__setattr__(self, "prototypes", _freeze(protos))

    @property
    def num_pixels(self) -> int:
        return self.vectors.shape[0]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]


@dataclass(frozen=True)
class LossOutput:
    """Mean loss over the batch's pixels and its per-pixel tangent gradient."""

    loss: float
    grad: np.ndarray  # (N, d), d(mean loss)/d(pixel embedding)

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise ValueError("loss must be finite")
        grad = np.asarray(self.grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise ValueError("gradient must be finite")
        object.__setattr__(self, "grad", _freeze(grad))


def posterior(v: np.ndarray, prototypes: np.ndarray, kappa: float) -> np.ndarray:
    """Softmax over kappa-scaled cosines of v against each prototype."""
    protos = np.asarray(prototypes, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[0] < 1:
        raise ValueError("need at least one prototype")
    scores = kappa * (protos @ np.asarray(v, dtype=np.float64))
    scores -= scores.max()
    e = np.exp(scores)
    return e / e.sum()


def _tangent_project(grad: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    return grad - np.sum(grad * vectors, axis=1, keepdims=True) * vectors


def vmf_loss(batch: LossBatch) -> LossOutput:
    """Mean negative log posterior of each pixel's own segment (all-prototype
    denominator), with the tangent-projected gradient of that mean."""
    n = batch.num_pixels
    if n == 0:
        return LossOutput(loss=0.0, grad=np.zeros((0, batch.prototypes.shape[1])))
    v, protos = batch.vectors, batch.prototypes
    kappa = batch.kappa

    scores = kappa * (v @ protos.T)  # (N, K)
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    z = e.sum(axis=1, keepdims=True)
    own_score = np.take_along_axis(scores, batch.own[:, None], axis=1)
    losses = (m - own_score) + np.log(z)

    p = e / z
    raw = -kappa * (protos[batch.own] - p @ protos)
    grad = _tangent_project(raw, v) / n
    return LossOutput(loss=float(losses.mean()), grad=grad)


def vmfn_loss(batch: LossBatch) -> LossOutput:
    """Mean neighborhood loss: -log of the probability mass on same-class
    neighbor segments, own segment excluded from the denominator.

    Pixels with an empty positive set contribute the vmf term instead.
    """
    n = batch.num_pixels
    if n == 0:
        return LossOutput(loss=0.0, grad=np.zeros((0, batch.prototypes.shape[1])))
    v, protos = batch.vectors, batch.prototypes
    kappa = batch.kappa

    scores = kappa * (v @ protos.T)  # (N, K)
    losses = np.empty(n, dtype=np.float64)
    raw = np.empty_like(v)

    # Pixels sharing (own segment, positives object) form one group and
    # are evaluated together; rows of different groups are disjoint.
    groups: dict[tuple[int, int], list[int]] = {}
    for i in range(n):
        pos = batch.positives[i]
        key = (int(batch.own[i]), id(pos) if pos.size else -1)
        groups.setdefault(key, []).append(i)

    for (own_c, _), row_list in groups.items():
        rows = np.asarray(row_list, dtype=np.int64)
        s = scores[rows]
        pos = batch.positives[rows[0]]
        if pos.size == 0:
            # No same-class neighbor: fall back to the all-prototype term.
            m = s.max(axis=1, keepdims=True)
            e = np.exp(s - m)
            z = e.sum(axis=1, keepdims=True)
            losses[rows] = (m.ravel() - s[:, own_c]) + np.log(z).ravel()
            p = e / z
            raw[rows] = -kappa * (protos[own_c] - p @ protos)
        else:
            block = s.copy()
            block[:, own_c] = -np.inf
            m = block.max(axis=1, keepdims=True)
            e = np.exp(block - m)  # own column becomes exactly 0
            den = e.sum(axis=1, keepdims=True)
            num = e[:, pos].sum(axis=1, keepdims=True)
            losses[rows] = (np.log(den) - np.log(num)).ravel()
            m_minus = (e @ protos) / den
            m_plus = (e[:, pos] @ protos[pos]) / num
            raw[rows] = -kappa * (m_plus - m_minus)

    grad = _tangent_project(raw, v) / n
    return LossOutput(loss=float(losses.mean()), grad=grad)
