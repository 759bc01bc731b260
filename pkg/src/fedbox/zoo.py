"""Zeroth-order gradient estimation over the adapted embedding.

The adapted embedding z_tilde = [z, client embedding] is the only thing the
sealed pipeline is differentiated "through": each coordinate is perturbed by
+/- rho, the loss difference divided by 2*rho gives that coordinate's gradient
estimate, the last d2 coordinates update the client embedding directly, and
the first d1 flow back through the encoder via ordinary backprop (chain rule).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nets
from .adapter import AutoEncoder, ClientEmbedding
from .nets import AdamState, Array

Pipeline = Callable[[Array], float]
BatchLoss = Callable[[Array, Array], Array]  # (z rows [K x d], labels [K]) -> losses [K]

ESTIMATORS = ("cge", "rge")


@dataclass
class ZOConfig:
    rho: float
    gamma1: float
    gamma2: float
    coord_subset: int | None = None
    estimator: str = "cge"

    def __post_init__(self) -> None:
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.coord_subset is not None and self.coord_subset < 1:
            raise ValueError("coord_subset must be at least 1")


@dataclass
class EmbeddingGradient:
    """Gradient over the full adapted embedding with its two split views."""

    full: Array
    d1: int

    def __post_init__(self) -> None:
        self.full = np.asarray(self.full, dtype=np.float64)
        if not 0 <= self.d1 <= self.full.shape[0]:
            raise ValueError("d1 must split the gradient vector")

    @property
    def grad_z(self) -> Array:
        return self.full[: self.d1]

    @property
    def grad_emb(self) -> Array:
        return self.full[self.d1 :]


def _select_coords(dim: int, coord_subset: int | None, rng) -> Array:
    if coord_subset is None or coord_subset >= dim:
        return np.arange(dim)
    if rng is None:
        raise ValueError("coordinate subsampling needs an rng")
    return np.sort(rng.choice(dim, size=coord_subset, replace=False))


def cge_gradient(
    pipeline: Pipeline,
    z_tilde: Array,
    rho: float,
    d1: int,
    coord_subset: int | None = None,
    rng: np.random.Generator | None = None,
) -> EmbeddingGradient:
    """Coordinate-wise central differences: (l(z+rho*e_j) - l(z-rho*e_j)) / 2rho.

    Exactly two pipeline evaluations per selected coordinate; unselected
    coordinates are left at zero.
    """
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    dim = z_tilde.shape[0]
    grad = np.zeros(dim)
    for j in _select_coords(dim, coord_subset, rng):
        step = np.zeros(dim)
        step[j] = rho
        plus = pipeline(z_tilde + step)
        minus = pipeline(z_tilde - step)
        if not np.isfinite(plus) or not np.isfinite(minus):
            raise FloatingPointError(f"non-finite pipeline loss at coordinate {j}")
        grad[j] = (plus - minus) / (2.0 * rho)
    return EmbeddingGradient(grad, d1)


def rge_gradient(
    pipeline: Pipeline,
    z_tilde: Array,
    rho: float,
    num_dirs: int,
    d1: int,
    rng: np.random.Generator | None = None,
    directions: Array | None = None,
) -> EmbeddingGradient:
    """Randomized estimate: directional central differences along unit vectors,
    scaled by dim/num_dirs so coordinate directions reduce it to the CGE."""
    if num_dirs < 1:
        raise ValueError("num_dirs must be at least 1")
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    dim = z_tilde.shape[0]
    if directions is None:
        if rng is None:
            raise ValueError("rge needs an rng or explicit directions")
        directions = rng.standard_normal((num_dirs, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    grad = np.zeros(dim)
    for k, u in enumerate(directions):
        plus = pipeline(z_tilde + rho * u)
        minus = pipeline(z_tilde - rho * u)
        if not np.isfinite(plus) or not np.isfinite(minus):
            raise FloatingPointError(f"non-finite pipeline loss at direction {k}")
        grad += ((plus - minus) / (2.0 * rho)) * u
    grad *= dim / num_dirs
    return EmbeddingGradient(grad, d1)


def cge_gradient_batch(
    loss_rows: BatchLoss,
    z_mat: Array,
    labels: Array,
    rho: float,
    coords: Array | None = None,
) -> Array:
    """Per-sample CGE for a batch of adapted embeddings in one stacked call.

    ``z_mat`` is [B x d]; the return is [B x d] with per-sample coordinate
    gradients (zero on unselected coordinates). ``coords`` names the swept
    coordinate indices (default: all). All 2 * |selected| * B perturbed rows
    go through ``loss_rows`` as a single stacked evaluation, so a
    sealed-model-backed loss issues exactly that many counted queries.
    """
    z_mat = np.asarray(z_mat, dtype=np.float64)
    b, dim = z_mat.shape
    coords = np.arange(dim) if coords is None else np.asarray(coords)
    n_sel = len(coords)
    stacked = np.repeat(z_mat[None, :, :], 2 * n_sel, axis=0)
    for idx, j in enumerate(coords):
        stacked[2 * idx, :, j] += rho
        stacked[2 * idx + 1, :, j] -= rho
    losses = loss_rows(
        stacked.reshape(2 * n_sel * b, dim), np.tile(labels, 2 * n_sel)
    ).reshape(2 * n_sel, b)
    if not np.all(np.isfinite(losses)):
        bad = int(coords[np.argwhere(~np.isfinite(losses))[0][0] // 2])
        raise FloatingPointError(f"non-finite pipeline loss at coordinate {bad}")
    grads = np.zeros((b, dim))
    grads[:, coords] = ((losses[0::2] - losses[1::2]) / (2.0 * rho)).T
    return grads


def rge_gradient_batch(
    loss_rows: BatchLoss,
    z_mat: Array,
    labels: Array,
    rho: float,
    num_dirs: int,
    rng: np.random.Generator,
    coords: Array | None = None,
) -> Array:
    """Per-sample RGE for a batch, one stacked evaluation of 2*num_dirs*B rows.

    With ``coords`` the random directions live on that coordinate subspace and
    the estimator scale shrinks to its dimension accordingly.
    """
    z_mat = np.asarray(z_mat, dtype=np.float64)
    b, full_dim = z_mat.shape
    coords = np.arange(full_dim) if coords is None else np.asarray(coords)
    dim = len(coords)
    directions = np.zeros((num_dirs, full_dim))
    directions[:, coords] = rng.standard_normal((num_dirs, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    stacked = np.concatenate(
        [z_mat[None, :, :] + rho * directions[:, None, :],
         z_mat[None, :, :] - rho * directions[:, None, :]],
        axis=0,
    )
    losses = loss_rows(
        stacked.reshape(2 * num_dirs * b, full_dim), np.tile(labels, 2 * num_dirs)
    ).reshape(2, num_dirs, b)
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("non-finite pipeline loss in randomized estimate")
    diffs = (losses[0] - losses[1]) / (2.0 * rho)  # [num_dirs x B]
    return (diffs.T @ directions) * (dim / num_dirs)


def update_embedding(
    emb: ClientEmbedding, grad_emb: Array, gamma2: float
) -> ClientEmbedding:
    """Plain descent step on the client embedding; returns a new embedding."""
    grad_emb = np.asarray(grad_emb, dtype=np.float64)
    if grad_emb.shape != emb.values.shape:
        raise nets.ShapeError(
            f"embedding grad shape {grad_emb.shape} != embedding {emb.values.shape}"
        )
    return ClientEmbedding(emb.values - gamma2 * grad_emb)


def update_encoder_chain(
    ae: AutoEncoder,
    batch: Array,
    grad_z_per_sample: Array,
    gamma1: float,
    opt_state: AdamState | None = None,
) -> None:
    """Chain-rule encoder update: backprop the estimated embedding gradient.

    ``grad_z_per_sample`` carries one d1-row per batch sample; it is averaged
    over the batch (the classification loss is an expectation) and pushed
    through the encoder's exact backward pass. The decoder is untouched.
    """
    batch = np.asarray(batch, dtype=np.float64)
    grad_z_per_sample = np.asarray(grad_z_per_sample, dtype=np.float64)
    if grad_z_per_sample.shape != (batch.shape[0], ae.d1):
        raise nets.ShapeError(
            f"grad_z shape {grad_z_per_sample.shape}, expected "
            f"{(batch.shape[0], ae.d1)}"
        )
    upstream = grad_z_per_sample / batch.shape[0]
    bundle = nets.backward(ae.encoder, batch, upstream)
    if opt_state is None:
        nets.sgd_step(ae.encoder, bundle, gamma1)
    else:
        nets.adam_step(ae.encoder, bundle, opt_state, gamma1)
