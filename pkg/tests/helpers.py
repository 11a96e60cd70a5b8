"""Shared oracles and fixtures-in-code for the test suite."""
import numpy as np
from scipy.special import ndtri

from n2n.diffcore import Rng
from n2n.flownet import CinnModel, randomize


def fd_jacobian(f, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((f(x + e) - f(x - e)) / (2 * step))
    return np.stack(cols, axis=1)


def identity_model(dim, dim_cond, n_blocks=3, **kw):
    perms = [np.arange(dim)] * n_blocks
    m = CinnModel(dim, dim_cond, n_blocks=n_blocks, perms=perms, **kw)
    m.mark_initialized()
    return m


def random_model(dim, dim_cond, n_blocks=6, seed=0, width=32):
    m = CinnModel(dim, dim_cond, n_blocks=n_blocks, hidden_width=width, embed_width=16,
                  dim_h=8, seed=seed)
    return randomize(m, Rng(seed + 100))


def stratified_normal(n, dim, seed=0):
    """Latin-hypercube N(0, I) sample: one draw per probability stratum per column."""
    rng = Rng(seed)
    cols = []
    for _ in range(dim):
        u = (rng.permutation(n) + rng.uniform(n)) / n
        cols.append(ndtri(u))
    return np.stack(cols, axis=1)
