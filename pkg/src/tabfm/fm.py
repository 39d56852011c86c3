"""Per-class factorization machine head: bias + linear term + pairwise interactions.

The pairwise term sums dot products of embedded feature vectors.  It is
computed with the square-of-sum-minus-sum-of-squares identity

    sum_{i<j} <e_i, e_j>_v = sum_f v_f * 0.5 * [ (sum_i e_if)^2 - sum_i e_if^2 ]

which costs O(m n) instead of the naive O(m n^2) double loop.  ``v`` is a
per-class diagonal metric on the embedding space (initialized to ones), so
the bracketed sums are class-independent and computed once per input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class FMHead:
    """Parameters: bias ``w0`` (C,), linear weights ``w`` (C, D) over the raw
    input, and the per-class interaction metric ``v`` (C, m)."""

    w0: np.ndarray
    w: np.ndarray
    v: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.w0.shape[0]

    def validate(self, width: int, n_classes: int, m: int) -> None:
        if self.w0.shape != (n_classes,):
            raise ShapeError(f"w0 shape {self.w0.shape}, expected ({n_classes},)")
        if self.w.shape != (n_classes, width):
            raise ShapeError(f"w shape {self.w.shape}, expected ({n_classes}, {width})")
        if self.v.shape != (n_classes, m):
            raise ShapeError(f"v shape {self.v.shape}, expected ({n_classes}, {m})")
        for arr in (self.w0, self.w, self.v):
            if not np.all(np.isfinite(arr)):
                raise ShapeError("non-finite FM parameters")

    def copy(self) -> "FMHead":
        return FMHead(w0=self.w0.copy(), w=self.w.copy(), v=self.v.copy())


def init_fm_head(width: int, n_classes: int, m: int) -> FMHead:
    """Zero bias and linear weights; interaction metric starts at all-ones."""
    return FMHead(w0=np.zeros(n_classes), w=np.zeros((n_classes, width)),
                  v=np.ones((n_classes, m)))


def _check_e(e: np.ndarray, m: int) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if e.ndim != 2 or e.shape[1] != m:
        raise ShapeError(f"embeddings have shape {e.shape}, expected (n, {m})")
    return e


def interaction_features(e: np.ndarray) -> np.ndarray:
    """The class-independent bracketed sums, one per embedding dimension.

    Accepts (n, m) or (N, n, m); the feature axis is the second to last.
    """
    e = np.asarray(e, dtype=float)
    s = e.sum(axis=-2)
    q = (e * e).sum(axis=-2)
    return 0.5 * (s * s - q)


def fm_forward(head: FMHead, x: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Per-class FM scores for one input: w0 + w.x + v.interaction_features(e)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (head.w.shape[1],):
        raise ShapeError(f"x has shape {x.shape}, expected ({head.w.shape[1]},)")
    e = _check_e(e, head.v.shape[1])
    return head.w0 + head.w @ x + head.v @ interaction_features(e)


def fm_forward_batch(head: FMHead, x: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Batched scores: X (N, D), E (N, n, m) -> (N, C)."""
    x = np.asarray(x, dtype=float)
    e = np.asarray(e, dtype=float)
    if x.ndim != 2 or x.shape[1] != head.w.shape[1]:
        raise ShapeError(f"X has shape {x.shape}, expected (N, {head.w.shape[1]})")
    if e.ndim != 3 or e.shape[0] != x.shape[0] or e.shape[2] != head.v.shape[1]:
        raise ShapeError(f"E has shape {e.shape}, inconsistent with X and head")
    return head.w0 + x @ head.w.T + interaction_features(e) @ head.v.T


def fm_pair_contribution(head: FMHead, e: np.ndarray, i: int, j: int, c: int) -> float:
    """Contribution of the (i, j) feature pair to class c's interaction term:
    sum_f v_cf * e_if * e_jf.  Requires i < j."""
    e = _check_e(e, head.v.shape[1])
    n = e.shape[0]
    if not (0 <= i < j < n):
        raise ShapeError(f"need 0 <= i < j < {n}, got i={i}, j={j}")
    if not 0 <= c < head.n_classes:
        raise ShapeError(f"class index {c} out of range")
    return float(np.sum(head.v[c] * e[i] * e[j]))


def pair_contribution_matrix(head: FMHead, e: np.ndarray) -> np.ndarray:
    """All pair contributions at once: (C, n, n) symmetric, zero diagonal.

    Entry [c, i, j] equals :func:`fm_pair_contribution`; summing the strict
    upper triangle reproduces the forward interaction term for class c.
    """
    e = _check_e(e, head.v.shape[1])
    out = np.empty((head.n_classes, e.shape[0], e.shape[0]))
    for c in range(head.n_classes):
        weighted = e * head.v[c]
        out[c] = weighted @ e.T
        np.fill_diagonal(out[c], 0.0)
    return out


def fm_backward(head: FMHead, x: np.ndarray, e: np.ndarray, upstream: np.ndarray):
    """Gradients of the FM scores for one input.

    Returns (dw0, dw, dv, de) for upstream = dL/dscores of shape (C,);
    de_if = sum_c upstream_c * v_cf * (S_f - e_if) with S_f = sum_j e_jf.
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (head.n_classes,):
        raise ShapeError(f"upstream has shape {upstream.shape}, expected ({head.n_classes},)")
    dw0, dw, dv, de = fm_backward_batch(head, np.asarray(x, dtype=float)[None, :],
                                        np.asarray(e, dtype=float)[None, :, :],
                                        upstream[None, :])
    return dw0, dw, dv, de[0]


def fm_backward_batch(head: FMHead, x: np.ndarray, e: np.ndarray, upstream: np.ndarray):
    """Batched FM gradients, accumulated over the batch for the parameters."""
    x = np.asarray(x, dtype=float)
    e = np.asarray(e, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    n_rows = x.shape[0]
    if upstream.shape != (n_rows, head.n_classes):
        raise ShapeError(
            f"upstream has shape {upstream.shape}, expected ({n_rows}, {head.n_classes})"
        )
    dw0 = upstream.sum(axis=0)
    dw = upstream.T @ x
    dv = upstream.T @ interaction_features(e)
    d_inter = upstream @ head.v                    # (N, m)
    s = e.sum(axis=1, keepdims=True)               # (N, 1, m)
    de = d_inter[:, None, :] * (s - e)             # (N, n, m)
    return dw0, dw, dv, de
