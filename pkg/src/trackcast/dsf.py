"""Diversity sampling: a deterministic map from a node feature to K latent
codes, trained so the decoded trajectory set is diverse and accurate.

Diversity is scored through a determinantal point process kernel
L = Diag(r) S Diag(r), where S is a Gaussian similarity over decoded
trajectories and r is a quality score that decays once a latent leaves a
radius-R ball.  The training loss per agent is the (negative) expected
cardinality surrogate -tr(I - (L + I)^-1) plus the squared error of the
closest sample to the ground-truth future; only the sampler's own
parameters are optimized, the backbone stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericError

DSF_PREFIX = "dsf"

QUALITY_EXPONENT_CAP = 50.0


def make_dsf(store: ad.ParamStore, rng: np.random.Generator, in_dim: int,
             hidden: int, k: int, latent_dim: int) -> None:
    store.create(f"{DSF_PREFIX}.l1.w", (in_dim, hidden), rng)
    store.create(f"{DSF_PREFIX}.l1.b", (hidden,), init="zeros")
    store.create(f"{DSF_PREFIX}.l2.w", (hidden, k * latent_dim), rng)
    store.create(f"{DSF_PREFIX}.l2.b", (k * latent_dim,), init="zeros")


def dsf_forward(store: ad.ParamStore, u: ad.Tensor, k: int,
                latent_dim: int) -> ad.Tensor:
    """Map (M, in_dim) node features to (M * K, latent_dim) latent codes.

    Deterministic: all correlation between an agent's samples lives here.
    Rows are agent-major (agent 0's K codes first).
    """
    h = ad.relu(ad.affine(u, store[f"{DSF_PREFIX}.l1.w"], store[f"{DSF_PREFIX}.l1.b"]))
    flat = ad.affine(h, store[f"{DSF_PREFIX}.l2.w"], store[f"{DSF_PREFIX}.l2.b"])
    return ad.reshape(flat, (u.shape[0] * k, latent_dim))


@dataclass
class DppKernel:
    """K x K kernel plus the pieces it is assembled from."""
    l: ad.Tensor          # Diag(r) S Diag(r)
    similarity: ad.Tensor  # S, unit diagonal
    quality: ad.Tensor     # r, (K, 1), >= 1 elementwise
    omega: float
    radius: float


def dpp_kernel(trajectories: ad.Tensor, latents: ad.Tensor, omega: float,
               radius: float) -> DppKernel:
    """Kernel over one agent's K samples.

    S_ab = exp(-omega ||f_a - f_b||^2) with the distance over all flattened
    trajectory coordinates; r_k = exp(max(R^2 - ||z_k||^2, 0)) with the
    exponent capped to avoid overflow.
    """
    if omega <= 0 or radius <= 0:
        raise ContractError("omega and radius must be positive")
    sq_norms = ad.sum_reduce(ad.multiply(trajectories, trajectories),
                             axis=1, keepdims=True)              # (K, 1)
    cross = ad.matmul(trajectories, ad.transpose(trajectories))  # (K, K)
    dist_sq = ad.add(ad.subtract(sq_norms, ad.multiply(cross, ad.constant(2.0))),
                     ad.transpose(sq_norms))
    # clip the tiny negatives of exact-duplicate rows
    dist_sq = ad.relu(dist_sq)
    similarity = ad.exp(ad.multiply(dist_sq, ad.constant(-omega)))

    z_sq = ad.sum_reduce(ad.multiply(latents, latents), axis=1, keepdims=True)
    exponent = ad.relu(ad.subtract(ad.constant(radius ** 2), z_sq))
    cap = ad.constant(QUALITY_EXPONENT_CAP)
    exponent = ad.subtract(cap, ad.relu(ad.subtract(cap, exponent)))
    quality = ad.exp(exponent)                                   # (K, 1)

    kernel = ad.multiply(similarity, ad.matmul(quality, ad.transpose(quality)))
    return DppKernel(l=kernel, similarity=similarity, quality=quality,
                     omega=omega, radius=radius)


def _cholesky_lower(matrix: np.ndarray) -> np.ndarray:
    """Plain Cholesky factor of an SPD matrix; NumericError on a bad pivot."""
    n = matrix.shape[0]
    lower = np.zeros_like(matrix)
    for i in range(n):
        for j in range(i + 1):
            s = matrix[i, j] - lower[i, :j] @ lower[j, :j]
            if i == j:
                if s <= 0.0:
                    raise NumericError("matrix is not positive definite")
                lower[i, i] = np.sqrt(s)
            else:
                lower[i, j] = s / lower[j, j]
    return lower


def _lower_inverse(lower: np.ndarray) -> np.ndarray:
    """Invert a lower-triangular matrix by forward substitution."""
    n = lower.shape[0]
    inv = np.zeros_like(lower)
    for i in range(n):
        inv[i, i] = 1.0 / lower[i, i]
        if i:
            inv[i, :i] = -(lower[i, :i] @ inv[:i, :i]) / lower[i, i]
    return inv


def _spd_inverse(matrix: np.ndarray) -> np.ndarray:
    lower = _cholesky_lower(matrix)
    lower_inv = _lower_inverse(lower)
    return lower_inv.T @ lower_inv


def dpp_loss(kernel: ad.Tensor) -> ad.Tensor:
    """-tr(I - (L + I)^-1) = -sum_n lambda_n / (lambda_n + 1), via Cholesky.

    Strictly non-positive; equals -K/2 exactly when L = I.  The gradient of
    tr((L + I)^-1) is -(L + I)^-2, applied symmetrically.
    """
    lv = kernel.value
    if lv.ndim != 2 or lv.shape[0] != lv.shape[1]:
        raise ContractError("kernel must be square")
    k = lv.shape[0]
    m = lv + np.eye(k)
    try:
        m_inv = _spd_inverse(m)
    except NumericError:
        try:
            m_inv = _spd_inverse(m + 1e-9 * np.eye(k))
        except NumericError:
            raise NumericError("kernel + I is not positive definite") from None
    loss_value = np.trace(m_inv) - k
    grad_matrix = -(m_inv @ m_inv)
    grad_matrix = 0.5 * (grad_matrix + grad_matrix.T)

    def vjp(g: np.ndarray) -> np.ndarray:
        return g * grad_matrix

    return ad.Tensor(loss_value, "dpp-loss", ((kernel, vjp),))


def dsf_loss(per_agent: list[tuple[ad.Tensor, ad.Tensor, np.ndarray]],
             omega: float, radius: float) -> ad.Tensor:
    """Mean over agents of diversity loss plus best-sample reconstruction.

    `per_agent` holds (decoded trajectories (K, D), latents (K, Dz),
    ground-truth future flattened (D,)) triples, K >= 2.
    """
    if not per_agent:
        raise ContractError("dsf_loss needs at least one agent")
    total: ad.Tensor | None = None
    for trajectories, latents, gt_future in per_agent:
        if trajectories.shape[0] < 2:
            raise ContractError("diversity needs K >= 2 samples")
        kern = dpp_kernel(trajectories, latents, omega, radius)
        diversity = dpp_loss(kern.l)
        diff = ad.subtract(trajectories, ad.constant(gt_future[None, :]))
        per_sample = ad.sum_reduce(ad.multiply(diff, diff), axis=1)  # (K,)
        best = int(np.argmin(per_sample.value))
        recon = ad.sum_reduce(ad.take_rows(per_sample, [best]))
        term = ad.add(diversity, recon)
        total = term if total is None else ad.add(total, term)
    return ad.multiply(total, ad.constant(1.0 / len(per_agent)))
