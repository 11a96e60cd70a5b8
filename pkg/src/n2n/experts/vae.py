"""Toy VAE with a learnable scalar output variance, frozen after training."""
from __future__ import annotations

import math

import numpy as np

from .. import diffcore as dc
from ..diffcore import AdamState, ParamStore, Rng
from ..flownet import FeedForward

GAMMA_FLOOR = 1e-4
LOG_GAMMA_FLOOR = math.log(GAMMA_FLOOR)


class ToyVae:
    """Encoder ``Theta`` -> (mu, var), decoder ``Lambda``, scalar ``gamma``."""

    def __init__(self, data_dim, latent_dim=8, width=128, seed=0):
        rng = Rng(seed)
        self.data_dim, self.latent_dim = data_dim, latent_dim
        self.store = ParamStore()
        self.encoder = FeedForward(self.store, "enc", data_dim, 2 * latent_dim, width, rng,
                                   zero_last=False)
        self.decoder = FeedForward(self.store, "dec", latent_dim, data_dim, width, rng,
                                   zero_last=False)
        self.log_gamma = self.store.add("log_gamma", np.zeros(()))

    @property
    def frozen(self):
        return self.store.frozen

    def encode(self, y):
        """Differentiable ``(mu, var)``; the variance goes through softplus."""
        out = self.encoder(y)
        mu, raw = dc.split(out, self.latent_dim)
        return mu, dc.softplus(raw)

    def decode(self, z):
        return self.decoder(z)

    # numpy interface used once the model is frozen
    def encode_mean(self, y):
        with dc.no_grad():
            return self.encode(np.atleast_2d(y))[0].data.copy()

    def encode_sample(self, y, rng: Rng):
        with dc.no_grad():
            mu, var = self.encode(np.atleast_2d(y))
        return mu.data + np.sqrt(var.data) * rng.normal(mu.shape)

    def decode_np(self, z):
        with dc.no_grad():
            return self.decode(np.atleast_2d(z)).data.copy()

    @property
    def gamma(self):
        return math.exp(max(float(self.log_gamma.data), LOG_GAMMA_FLOOR))


def gaussian_kl(mu, var):
    """Per-sample KL(N(mu, diag var) || N(0, I))."""
    return dc.mul(dc.sum(dc.sub(dc.add(var, dc.square(mu)), dc.add(dc.log(var), 1.0)), axis=-1), 0.5)


def toy_vae_loss(batch, vae: ToyVae, rng: Rng, kl_weight=1.0):
    """Batch mean of ``|y - y_rec| / gamma + log gamma + KL``.

    ``|.|`` is the per-sample (non-squared) Euclidean norm and ``y_rec``
    decodes a reparameterised sample.
    """
    y = dc.as_tensor(np.atleast_2d(batch))
    mu, var = vae.encode(y)
    eps = rng.normal(mu.shape)
    z = dc.add(mu, dc.mul(dc.sqrt(var, eps=0.0), eps))
    resid = dc.sub(y, vae.decode(z))
    # tiny eps: the norm's gradient resid/|resid| stays bounded, and the loss bias is negligible
    rec = dc.sqrt(dc.sum(dc.square(resid), axis=-1), eps=1e-30)
    log_gamma = vae.log_gamma
    if float(log_gamma.data) < LOG_GAMMA_FLOOR:
        log_gamma = dc.Tensor(LOG_GAMMA_FLOOR)
    per_sample = dc.add(dc.mul(rec, dc.exp(dc.neg(log_gamma))), log_gamma)
    per_sample = dc.add(per_sample, dc.mul(gaussian_kl(mu, var), kl_weight))
    return dc.mean(per_sample)


def train_toy_vae(images, latent_dim=8, width=128, n_steps=4000, batch_size=64, lr=1e-3,
                  kl_weight=1.0, seed=0):
    """Fit on ``images`` (rows) and freeze.  Deterministic given ``seed``."""
    images = np.asarray(images, dtype=np.float64)
    vae = ToyVae(images.shape[1], latent_dim, width, seed)
    rng = Rng(seed + 1)
    state = AdamState(lr=lr)
    for _ in range(n_steps):
        idx = rng.integers(len(images), (batch_size,))
        vae.store.zero_grad()
        loss = toy_vae_loss(images[idx], vae, rng, kl_weight)
        dc.backward(loss)
        dc.adam_step(state, vae.store)
        if vae.log_gamma.data < LOG_GAMMA_FLOOR:
            vae.log_gamma.data[...] = LOG_GAMMA_FLOOR
    vae.store.freeze()
    return vae
