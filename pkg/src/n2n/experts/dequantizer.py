"""Dequantisation of discrete class labels through a small VAE."""
from __future__ import annotations

import numpy as np

from .. import diffcore as dc
from ..diffcore import AdamState, ParamStore, Rng
from ..flownet import FeedForward
from .vae import gaussian_kl


class UntrainedError(RuntimeError):
    pass


class Dequantizer:
    """Embedding ``h = W c`` of one-hot labels and a mini-VAE over ``h``.

    ``noise_scale`` is the output standard deviation assumed by the
    reconstruction term during training.
    """

    def __init__(self, n_classes=10, emb_dim=8, latent_dim=4, width=64, noise_scale=0.1, seed=0):
        rng = Rng(seed)
        self.n_classes, self.emb_dim, self.latent_dim = n_classes, emb_dim, latent_dim
        self.noise_scale = noise_scale
        self.W = rng.normal((emb_dim, n_classes))
        self.store = ParamStore()
        self.encoder = FeedForward(self.store, "enc", emb_dim, 2 * latent_dim, width, rng,
                                   zero_last=False)
        self.decoder = FeedForward(self.store, "dec", latent_dim, emb_dim, width, rng,
                                   zero_last=False)
        self.trained = False

    def embed(self, c):
        """``W c`` for one-hot rows ``c`` (or integer labels)."""
        c = np.asarray(c)
        if c.ndim <= 1 and c.dtype.kind in "iu":
            return self.W.T[c]
        return np.atleast_2d(c) @ self.W.T

    def _encode(self, h):
        mu, raw = dc.split(self.encoder(h), self.latent_dim)
        return mu, dc.softplus(raw)

    def loss(self, h, rng: Rng):
        mu, var = self._encode(h)
        z = dc.add(mu, dc.mul(dc.sqrt(var, eps=0.0), rng.normal(mu.shape)))
        rec = dc.sum(dc.square(dc.sub(h, self.decoder(z))), axis=-1)
        rec = dc.mul(rec, 0.5 / self.noise_scale ** 2)
        return dc.mean(dc.add(rec, gaussian_kl(mu, var)))

    def fit(self, n_steps=2000, batch_size=64, lr=1e-3, seed=0):
        rng = Rng(seed)
        state = AdamState(lr=lr)
        for _ in range(n_steps):
            labels = rng.integers(self.n_classes, (batch_size,))
            self.store.zero_grad()
            dc.backward(self.loss(self.embed(labels), rng))
            dc.adam_step(state, self.store)
        self.store.freeze()
        self.trained = True
        return self

    def dequantize(self, c, rng: Rng, sigma_scale=1.0):
        """Stochastic reconstruction ``h_hat = dec(mu(Wc) + sigma(Wc) eps)``."""
        if not self.trained:
            raise UntrainedError("dequantizer has not been trained")
        h = self.embed(c)
        with dc.no_grad():
            mu, var = self._encode(h)
            z = mu.data + sigma_scale * np.sqrt(var.data) * rng.normal(mu.shape)
            return self.decoder(z).data.copy()

    def nearest_class(self, h_hat):
        d = ((np.atleast_2d(h_hat)[:, :, None] - self.W[None]) ** 2).sum(axis=1)
        return np.argmin(d, axis=1)


def dequantize_label(c, dq: Dequantizer, rng: Rng):
    return dq.dequantize(c, rng)


def build_stacked_target(z_tilde, h_hat):
    """``e_B = [z_tilde, h_hat]`` along the feature axis."""
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    if h_hat.size == 0:
        return z_tilde.copy()
    return np.concatenate([z_tilde, h_hat], axis=-1)


def split_stacked_target(e_b, z_dim):
    e_b = np.asarray(e_b)
    return e_b[..., :z_dim], e_b[..., z_dim:]
