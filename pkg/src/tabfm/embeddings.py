"""Per-feature embedding matrices condensing raw feature blocks to dense vectors.

Each feature i owns a learned matrix of shape (m, d_i) applied to its slice of
the raw input: e_i = A_i x_i.  A group feature (a "meta embedding") is just a
feature whose slice spans several continuous columns, so grouped and plain
schemas run through the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureSchema
from .errors import ShapeError


@dataclass
class EmbeddingBank:
    """Embedding length m plus one (m, d_i) matrix per feature, in schema order."""

    m: int
    matrices: list

    def validate(self, schema: FeatureSchema) -> None:
        if len(self.matrices) != schema.n_features:
            raise ShapeError(
                f"bank holds {len(self.matrices)} matrices for {schema.n_features} features"
            )
        for mat, spec in zip(self.matrices, schema.features):
            if mat.shape != (self.m, spec.width):
                raise ShapeError(
                    f"feature {spec.name!r}: matrix shape {mat.shape}, "
                    f"expected {(self.m, spec.width)}"
                )
            if not np.all(np.isfinite(mat)):
                raise ShapeError(f"feature {spec.name!r}: non-finite embedding entries")

    def copy(self) -> "EmbeddingBank":
        return EmbeddingBank(m=self.m, matrices=[a.copy() for a in self.matrices])


def init_embeddings(schema: FeatureSchema, m: int, seed) -> EmbeddingBank:
    """Draw a fresh bank with entries i.i.d. uniform on [-1/sqrt(m), +1/sqrt(m)].

    The scale keeps pairwise dot products O(1) at the start.  Deterministic
    given the seed.
    """
    if m < 1:
        raise ShapeError(f"embedding length must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(m)
    matrices = [rng.uniform(-bound, bound, size=(m, f.width)) for f in schema.features]
    return EmbeddingBank(m=m, matrices=matrices)


def embed(bank: EmbeddingBank, x: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Embed one raw input vector; returns the (n, m) stack of e_i = A_i x_i."""
    x = np.asarray(x, dtype=float)
    if x.shape != (schema.width,):
        raise ShapeError(f"x has shape {x.shape}, expected ({schema.width},)")
    return embed_batch(bank, x[None, :], schema)[0]


def embed_batch(bank: EmbeddingBank, x: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Embed a (N, D) batch into (N, n, m)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != schema.width:
        raise ShapeError(f"X has shape {x.shape}, expected (N, {schema.width})")
    out = np.empty((x.shape[0], schema.n_features, bank.m))
    for i, sl in enumerate(schema.slices):
        out[:, i, :] = x[:, sl] @ bank.matrices[i].T
    return out


def embed_jacobians(bank: EmbeddingBank, x: np.ndarray, schema: FeatureSchema,
                    upstream: np.ndarray):
    """Gradients of a scalar loss through the embedding layer for one input.

    Given upstream = dL/de (n, m), returns (dL/dA_i list, dL/dx) with
    dL/dA_i = (dL/de_i) x_i^T and dL/dx_i = A_i^T (dL/de_i).
    """
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (schema.n_features, bank.m):
        raise ShapeError(
            f"upstream has shape {upstream.shape}, expected ({schema.n_features}, {bank.m})"
        )
    grads_a, dx = embed_jacobians_batch(bank, x[None, :], schema, upstream[None, :, :])
    return grads_a, dx[0]


def embed_jacobians_batch(bank: EmbeddingBank, x: np.ndarray, schema: FeatureSchema,
                          upstream: np.ndarray):
    """Batched embedding gradients, accumulated over the batch axis for dA."""
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    n_rows = x.shape[0]
    if upstream.shape != (n_rows, schema.n_features, bank.m):
        raise ShapeError(
            f"upstream has shape {upstream.shape}, expected "
            f"({n_rows}, {schema.n_features}, {bank.m})"
        )
    grads_a = []
    dx = np.zeros_like(x)
    for i, sl in enumerate(schema.slices):
        u_i = upstream[:, i, :]                    # (N, m)
        grads_a.append(u_i.T @ x[:, sl])           # (m, d_i)
        dx[:, sl] = u_i @ bank.matrices[i]         # (N, d_i)
    return grads_a, dx
