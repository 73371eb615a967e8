"""Conditional VAE over future ground-plane trajectories.

The generative model conditions on a context vector (the object's final
graph feature concatenated with a summary of its past) and a Gaussian
latent.  A GRU encoder reads the ground-truth future and emits posterior
parameters; a GRU decoder, initialized from (latent, context), emits
per-step displacements that are accumulated from the last observed (x, z).
Predicting displacements instead of absolute positions keeps the numerics
well conditioned.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractError

ENC_PREFIX = "cvae.enc"
DEC_PREFIX = "cvae.dec"

STEP_DIM = 2  # (x, z) displacement per future frame


def make_cvae(store: ad.ParamStore, rng: np.random.Generator, latent_dim: int,
              cond_dim: int, hidden: int = 64) -> None:
    enc_in = STEP_DIM + cond_dim
    store.create(f"{ENC_PREFIX}.gru.zr.w", (enc_in + hidden, 2 * hidden), rng)
    store.create(f"{ENC_PREFIX}.gru.zr.b", (2 * hidden,), init="zeros")
    store.create(f"{ENC_PREFIX}.gru.cand.w", (enc_in + hidden, hidden), rng)
    store.create(f"{ENC_PREFIX}.gru.cand.b", (hidden,), init="zeros")
    store.create(f"{ENC_PREFIX}.mu.w", (hidden, latent_dim), rng)
    store.create(f"{ENC_PREFIX}.mu.b", (latent_dim,), init="zeros")
    store.create(f"{ENC_PREFIX}.logsigma.w", (hidden, latent_dim), rng)
    store.create(f"{ENC_PREFIX}.logsigma.b", (latent_dim,), init="zeros")

    dec_in = STEP_DIM + latent_dim
    store.create(f"{DEC_PREFIX}.init.w", (latent_dim + cond_dim, hidden), rng)
    store.create(f"{DEC_PREFIX}.init.b", (hidden,), init="zeros")
    store.create(f"{DEC_PREFIX}.gru.zr.w", (dec_in + hidden, 2 * hidden), rng)
    store.create(f"{DEC_PREFIX}.gru.zr.b", (2 * hidden,), init="zeros")
    store.create(f"{DEC_PREFIX}.gru.cand.w", (dec_in + hidden, hidden), rng)
    store.create(f"{DEC_PREFIX}.gru.cand.b", (hidden,), init="zeros")
    store.create(f"{DEC_PREFIX}.out.w", (hidden, STEP_DIM), rng)
    store.create(f"{DEC_PREFIX}.out.b", (STEP_DIM,), init="zeros")


def _gru_cell(store: ad.ParamStore, prefix: str, x: ad.Tensor,
              h: ad.Tensor, hidden: int) -> ad.Tensor:
    xh = ad.concat([x, h], axis=1)
    zr = ad.sigmoid(ad.affine(xh, store[f"{prefix}.gru.zr.w"],
                              store[f"{prefix}.gru.zr.b"]))
    z = ad.slice_axis(zr, 1, 0, hidden)
    r = ad.slice_axis(zr, 1, hidden, 2 * hidden)
    x_rh = ad.concat([x, ad.multiply(r, h)], axis=1)
    cand = ad.tanh(ad.affine(x_rh, store[f"{prefix}.gru.cand.w"],
                             store[f"{prefix}.gru.cand.b"]))
    one_minus_z = ad.subtract(ad.constant(1.0), z)
    return ad.add(ad.multiply(one_minus_z, h), ad.multiply(z, cand))


def _future_displacements(futures: np.ndarray, last_xz: np.ndarray) -> np.ndarray:
    """(M, T, 2) absolute futures -> per-step displacements from last observed."""
    base = np.concatenate([last_xz[:, None, :], futures[:, :-1, :]], axis=1)
    return futures - base


def encode_posterior(store: ad.ParamStore, futures: np.ndarray,
                     cond: ad.Tensor, last_xz: np.ndarray
                     ) -> tuple[ad.Tensor, ad.Tensor]:
    """Posterior parameters (mu, log sigma), each (M, latent_dim).

    The GRU reads the ground-truth future as displacement steps, each
    concatenated with the conditioning context.
    """
    m, horizon, _ = futures.shape
    hidden = store[f"{ENC_PREFIX}.mu.w"].shape[0]
    disp = _future_displacements(futures, last_xz)
    h = ad.constant(np.zeros((m, hidden)))
    for t in range(horizon):
        x = ad.concat([ad.constant(disp[:, t, :]), cond], axis=1)
        h = _gru_cell(store, ENC_PREFIX, x, h, hidden)
    mu = ad.affine(h, store[f"{ENC_PREFIX}.mu.w"], store[f"{ENC_PREFIX}.mu.b"])
    log_sigma = ad.affine(h, store[f"{ENC_PREFIX}.logsigma.w"],
                          store[f"{ENC_PREFIX}.logsigma.b"])
    return mu, log_sigma


def decode(store: ad.ParamStore, z: ad.Tensor, cond: ad.Tensor,
           start_disp: np.ndarray, last_xz: np.ndarray,
           horizon: int) -> ad.Tensor:
    """Decode latents into absolute (B, horizon * 2) future positions.

    The recurrent state starts from a transform of (z, cond); each step's
    input is the previous displacement and the latent, and emitted
    displacements accumulate from the last observed position.
    """
    batch = z.shape[0]
    hidden = store[f"{DEC_PREFIX}.init.w"].shape[1]
    h = ad.tanh(ad.affine(ad.concat([z, cond], axis=1),
                          store[f"{DEC_PREFIX}.init.w"],
                          store[f"{DEC_PREFIX}.init.b"]))
    prev_disp: ad.Tensor = ad.constant(np.asarray(start_disp, dtype=np.float64)
                                       .reshape(batch, STEP_DIM))
    pos = ad.constant(np.asarray(last_xz, dtype=np.float64).reshape(batch, STEP_DIM))
    outputs = []
    for _ in range(horizon):
        x = ad.concat([prev_disp, z], axis=1)
        h = _gru_cell(store, DEC_PREFIX, x, h, hidden)
        disp = ad.affine(h, store[f"{DEC_PREFIX}.out.w"], store[f"{DEC_PREFIX}.out.b"])
        pos = ad.add(pos, disp)
        outputs.append(pos)
        prev_disp = disp
    return ad.concat(outputs, axis=1)


def kl_terms(mu: ad.Tensor, log_sigma: ad.Tensor) -> ad.Tensor:
    """Per-row KL(N(mu, diag sigma^2) || N(0, I)); sigma = exp(log_sigma)."""
    sigma_sq = ad.exp(ad.multiply(log_sigma, ad.constant(2.0)))
    inner = ad.subtract(ad.add(ad.multiply(mu, mu), sigma_sq),
                        ad.add(ad.constant(1.0), ad.multiply(log_sigma, ad.constant(2.0))))
    return ad.multiply(ad.sum_reduce(inner, axis=1), ad.constant(0.5))


def kl_diag_gauss(mu, sigma) -> float:
    """Closed-form KL to the standard normal: sum of (mu^2 + sigma^2 - 1 - 2 log sigma) / 2."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractError("sigma must be positive elementwise")
    return float(0.5 * np.sum(mu ** 2 + sigma ** 2 - 1.0 - 2.0 * np.log(sigma)))


def elbo_loss(store: ad.ParamStore, futures: np.ndarray, cond: ad.Tensor,
              start_disp: np.ndarray, last_xz: np.ndarray, alpha: float,
              eps: np.ndarray) -> tuple[ad.Tensor, float, float]:
    """Negative variational lower bound, averaged over the batch.

    Per agent: ||f_gt - f_decoded||^2 / (2 alpha) + KL, with the latent
    reparameterized as mu + sigma * eps for the supplied noise draw.
    Returns (loss, reconstruction part, kl part) with the parts as floats
    for logging.
    """
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    m, horizon, _ = futures.shape
    mu, log_sigma = encode_posterior(store, futures, cond, last_xz)
    z = ad.add(mu, ad.multiply(ad.exp(log_sigma), ad.constant(eps)))
    decoded = decode(store, z, cond, start_disp, last_xz, horizon)
    diff = ad.subtract(decoded, ad.constant(futures.reshape(m, horizon * STEP_DIM)))
    recon = ad.multiply(ad.mean_reduce(ad.sum_reduce(ad.multiply(diff, diff), axis=1)),
                        ad.constant(1.0 / (2.0 * alpha)))
    kl = ad.mean_reduce(kl_terms(mu, log_sigma))
    return ad.add(recon, kl), recon.item(), kl.item()


def sample_random(store: ad.ParamStore, cond_value: np.ndarray,
                  start_disp: np.ndarray, last_xz: np.ndarray, horizon: int,
                  k: int, latent_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Decode k i.i.d. standard-normal latents per agent; (M, K, T, 2)."""
    if k < 1:
        raise ContractError("need at least one sample")
    m = cond_value.shape[0]
    if m == 0:
        return np.zeros((0, k, horizon, STEP_DIM))
    z = rng.standard_normal((m * k, latent_dim))
    cond_rep = np.repeat(cond_value, k, axis=0)
    start_rep = np.repeat(start_disp, k, axis=0)
    last_rep = np.repeat(last_xz, k, axis=0)
    decoded = decode(store, ad.constant(z), ad.constant(cond_rep),
                     start_rep, last_rep, horizon)
    return decoded.value.reshape(m, k, horizon, STEP_DIM)
