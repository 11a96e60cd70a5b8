"""Linear-Gaussian world with frozen linear experts and exact conditionals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import Rng


@dataclass(frozen=True)
class GaussianWorld:
    """``x = A u + sx n + mx``, ``y = B u + sy n' + my`` with ``u ~ N(0, I_k)``.

    Experts are linear: ``e_A = Phi x``, ``e_B = Theta y`` and the decoder
    ``Lambda`` is a left inverse of ``Theta``.
    """
    A: np.ndarray
    B: np.ndarray
    sigma_x: float
    sigma_y: float
    Phi: np.ndarray
    Theta: np.ndarray
    mean_x: np.ndarray
    mean_y: np.ndarray

    def __post_init__(self):
        for arr in (self.A, self.B, self.Phi, self.Theta, self.mean_x, self.mean_y):
            arr.flags.writeable = False
        if self.A.shape[1] != self.B.shape[1]:
            raise ValueError("A and B must share the latent dimension")
        cov_aa = self.joint_cov()[: self.dim_a, : self.dim_a]
        if np.linalg.matrix_rank(cov_aa) < self.dim_a:
            raise ValueError("degenerate world: e_A has a singular covariance")

    @property
    def k(self):
        return self.A.shape[1]

    @property
    def dim_a(self):
        return self.Phi.shape[0]

    @property
    def dim_b(self):
        return self.Theta.shape[0]

    @property
    def Lambda(self):
        return np.linalg.pinv(self.Theta)

    @classmethod
    def random(cls, seed=7, k=4, dim_x=4, dim_y=4, sigma_x=0.3, sigma_y=0.3):
        rng = Rng(seed)
        A = _well_conditioned(rng, dim_x, k)
        B = _well_conditioned(rng, dim_y, k)
        Phi = _orthogonal(rng, dim_x)
        Theta = _orthogonal(rng, dim_y)
        mean_x = rng.normal(dim_x)
        mean_y = rng.normal(dim_y)
        return cls(A, B, float(sigma_x), float(sigma_y), Phi, Theta, mean_x, mean_y)

    @classmethod
    def linear(cls, A, B, sigma_x=0.0, sigma_y=0.0, Phi=None, Theta=None):
        A, B = np.asarray(A, float), np.asarray(B, float)
        Phi = np.eye(A.shape[0]) if Phi is None else np.asarray(Phi, float)
        Theta = np.eye(B.shape[0]) if Theta is None else np.asarray(Theta, float)
        return cls(A, B, float(sigma_x), float(sigma_y), Phi, Theta,
                   np.zeros(A.shape[0]), np.zeros(B.shape[0]))

    @classmethod
    def ambiguous(cls, dim=4, seed=0):
        """``e_B = M e_A + n`` with ``n ~ N(0, I)``: unit conditional variance."""
        M = Rng(seed).normal((dim, dim)) / np.sqrt(dim)
        A = np.hstack([np.eye(dim), np.zeros((dim, dim))])
        B = np.hstack([M, np.eye(dim)])
        return cls.linear(A, B)

    @classmethod
    def deterministic(cls, dim=4, seed=0):
        """``e_B = M e_A`` exactly: zero conditional variance."""
        M = Rng(seed).normal((dim, dim)) / np.sqrt(dim)
        return cls.linear(np.eye(dim), M)

    def joint_mean(self):
        return np.concatenate([self.Phi @ self.mean_x, self.Theta @ self.mean_y])

    def joint_cov(self):
        sxx = self.A @ self.A.T + self.sigma_x ** 2 * np.eye(self.A.shape[0])
        syy = self.B @ self.B.T + self.sigma_y ** 2 * np.eye(self.B.shape[0])
        sxy = self.A @ self.B.T
        caa = self.Phi @ sxx @ self.Phi.T
        cbb = self.Theta @ syy @ self.Theta.T
        cab = self.Phi @ sxy @ self.Theta.T
        return np.block([[caa, cab], [cab.T, cbb]])

    def conditional(self, e_a):
        """Mean(s) and covariance of ``p(e_B | e_A)`` via the Schur complement."""
        e_a = np.asarray(e_a, float)
        mu = self.joint_mean()
        cov = self.joint_cov()
        da = self.dim_a
        caa, cab, cbb = cov[:da, :da], cov[:da, da:], cov[da:, da:]
        gain = np.linalg.solve(caa, cab).T
        mean = mu[da:] + (e_a - mu[:da]) @ gain.T
        cond_cov = cbb - gain @ cab
        cond_cov = 0.5 * (cond_cov + cond_cov.T)
        return mean, cond_cov

    def sample(self, rng: Rng, n: int):
        """Return ``(x, y, e_a, e_b)``, each with ``n`` rows."""
        u = rng.normal((n, self.k))
        x = u @ self.A.T + self.sigma_x * rng.normal((n, self.A.shape[0])) + self.mean_x
        y = u @ self.B.T + self.sigma_y * rng.normal((n, self.B.shape[0])) + self.mean_y
        return x, y, self.encode_a(x), self.encode_b(y)

    def pairs(self, rng: Rng, n: int):
        _, _, e_a, e_b = self.sample(rng, n)
        return e_a, e_b

    def encode_a(self, x):
        return np.asarray(x) @ self.Phi.T

    def encode_b(self, y):
        return np.asarray(y) @ self.Theta.T

    def decode_b(self, e_b):
        return np.asarray(e_b) @ self.Lambda.T


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal((n, n)))
    return q * np.sign(np.diag(r))


def _well_conditioned(rng, rows, cols):
    # singular values in [0.6, 1.2]: every latent direction is observed
    u, _, vt = np.linalg.svd(rng.normal((rows, cols)), full_matrices=False)
    s = 0.6 + 0.6 * rng.uniform(min(rows, cols))
    return (u * s) @ vt


def world_conditional(e_a, w: GaussianWorld):
    return w.conditional(e_a)
