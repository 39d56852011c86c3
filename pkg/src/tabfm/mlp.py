"""Deep head: an MLP over the concatenated embedding vectors.

Hidden layers use ReLU and inverted dropout (activations divided by the keep
probability at train time, so eval mode applies no mask and is deterministic).
A linear output projection maps the last hidden layer to C class scores; the
ReLU subgradient at 0 is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class MLPHead:
    """Hidden-layer weights/biases (two layers, optionally three for the
    standalone deep baseline), output projection, and the dropout rate
    applied to every hidden activation during training."""

    weights: list           # hidden weights, layer k of shape (h_k, in_k)
    biases: list            # hidden biases, (h_k,)
    w_out: np.ndarray       # (C, h_last)
    b_out: np.ndarray       # (C,)
    dropout_rate: float = 0.0

    @property
    def n_classes(self) -> int:
        return self.w_out.shape[0]

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    def validate(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("hidden weights/biases lists are inconsistent")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout rate {self.dropout_rate} outside [0, 1)")
        prev = self.weights[0].shape[1]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
                raise ShapeError(f"hidden layer {k}: shapes {w.shape}/{b.shape} inconsistent")
            prev = w.shape[0]
        if self.w_out.shape[1] != prev or self.b_out.shape != (self.w_out.shape[0],):
            raise ShapeError("output projection inconsistent with last hidden layer")
        for arr in (*self.weights, *self.biases, self.w_out, self.b_out):
            if not np.all(np.isfinite(arr)):
                raise ShapeError("non-finite MLP parameters")

    def copy(self) -> "MLPHead":
        return MLPHead(weights=[w.copy() for w in self.weights],
                       biases=[b.copy() for b in self.biases],
                       w_out=self.w_out.copy(), b_out=self.b_out.copy(),
                       dropout_rate=self.dropout_rate)


def init_mlp_head(input_width: int, hidden_sizes, n_classes: int,
                  dropout_rate: float, seed) -> MLPHead:
    """He-scaled normal init for weights, zero biases; deterministic given seed."""
    sizes = [h for h in hidden_sizes if h]  # a 0/None entry means "no layer"
    if not sizes:
        raise ShapeError("MLP needs at least one hidden layer")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    prev = input_width
    for h in sizes:
        weights.append(rng.normal(0.0, np.sqrt(2.0 / prev), size=(h, prev)))
        biases.append(np.zeros(h))
        prev = h
    w_out = rng.normal(0.0, np.sqrt(1.0 / prev), size=(n_classes, prev))
    head = MLPHead(weights=weights, biases=biases, w_out=w_out,
                   b_out=np.zeros(n_classes), dropout_rate=dropout_rate)
    head.validate()
    return head


def _flatten(e: np.ndarray, width: int) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    flat = e.reshape(e.shape[0], -1) if e.ndim == 3 else e.reshape(1, -1)
    if flat.shape[1] != width:
        raise ShapeError(f"concatenated embeddings width {flat.shape[1]}, expected {width}")
    return flat


def mlp_forward(head: MLPHead, e: np.ndarray, mode: str = "eval", rng=None):
    """Forward pass for one input's embeddings (n, m).

    Returns scores (C,) in eval mode, or (scores, masks) in train mode where
    masks are the sampled inverted-dropout multipliers (one per hidden layer).
    """
    if mode == "train":
        scores, masks, _ = mlp_forward_batch(head, _flatten(e, head.input_width),
                                             mode="train", rng=rng)
        return scores[0], masks
    scores, _, _ = mlp_forward_batch(head, _flatten(e, head.input_width), mode="eval")
    return scores[0]


def mlp_forward_batch(head: MLPHead, flat: np.ndarray, mode: str = "eval", rng=None):
    """Batched forward over pre-flattened embeddings (N, n*m).

    Returns (scores, masks, hidden_activations); masks is None in eval mode.
    The activations are the post-dropout hidden outputs needed by backward.
    """
    if mode not in ("train", "eval"):
        raise ShapeError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and head.dropout_rate > 0.0 and rng is None:
        raise ShapeError("train mode with dropout requires an rng")
    h = flat
    masks = [] if mode == "train" else None
    hidden = []
    keep = 1.0 - head.dropout_rate
    for w, b in zip(head.weights, head.biases):
        h = np.maximum(0.0, h @ w.T + b)
        if mode == "train":
            if head.dropout_rate > 0.0:
                mask = (rng.random(h.shape) >= head.dropout_rate) / keep
            else:
                mask = np.ones_like(h)
            masks.append(mask)
            h = h * mask
        hidden.append(h)
    scores = h @ head.w_out.T + head.b_out
    return scores, masks, hidden


def mlp_backward(head: MLPHead, e: np.ndarray, masks, upstream: np.ndarray):
    """Gradients for one input; ``masks`` must come from the paired forward call.

    Returns (d_weights, d_biases, d_w_out, d_b_out, de) with de shaped like e.
    """
    e = np.asarray(e, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (head.n_classes,):
        raise ShapeError(f"upstream has shape {upstream.shape}, expected ({head.n_classes},)")
    flat = _flatten(e, head.input_width)
    grads, dflat = mlp_backward_batch(head, flat, masks, upstream[None, :])
    return (*grads, dflat.reshape(e.shape))


def mlp_backward_batch(head: MLPHead, flat: np.ndarray, masks, upstream: np.ndarray):
    """Batched backprop through linear/ReLU/dropout layers.

    Recomputes the forward activations under the provided masks (cheap at
    these sizes and keeps forward's return surface small), then walks the
    layers in reverse.  Returns ((d_weights, d_biases, d_w_out, d_b_out), dflat).
    """
    flat = np.asarray(flat, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    n_layers = len(head.weights)
    if masks is None:
        masks = [None] * n_layers
    if len(masks) != n_layers:
        raise ShapeError(f"{len(masks)} masks for {n_layers} hidden layers")

    # forward replay, keeping pre-activations
    pre, post = [], []
    h = flat
    for k, (w, b) in enumerate(zip(head.weights, head.biases)):
        z = h @ w.T + b
        a = np.maximum(0.0, z)
        if masks[k] is not None:
            if masks[k].shape != a.shape:
                raise ShapeError(f"mask {k} has shape {masks[k].shape}, expected {a.shape}")
            a = a * masks[k]
        pre.append(z)
        post.append(a)
        h = a

    d_w_out = upstream.T @ post[-1]
    d_b_out = upstream.sum(axis=0)
    grad = upstream @ head.w_out
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        if masks[k] is not None:
            grad = grad * masks[k]
        grad = grad * (pre[k] > 0.0)           # ReLU subgradient, 0 at 0
        below = flat if k == 0 else post[k - 1]
        d_weights[k] = grad.T @ below
        d_biases[k] = grad.sum(axis=0)
        grad = grad @ head.weights[k]
    return (d_weights, d_biases, d_w_out, d_b_out), grad
