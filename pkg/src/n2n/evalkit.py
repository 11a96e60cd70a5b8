"""Evaluation: Frechet distance between Gaussian fits, independence
diagnostics, the closed-form loss optimum and the MLP ablation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, ParamStore, Rng
from .flownet import FeedForward
from .objective import TrainConfig, train


@dataclass
class GaussStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match the mean")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-10:
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_samples(cls, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(axis=0), 0.5 * (cov + cov.T), len(x))


def _psd_sqrt(a):
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(s1: GaussStats, s2: GaussStats) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace term uses ``tr((S1^(1/2) S2 S1^(1/2))^(1/2))``, which equals
    ``tr((S1 S2)^(1/2))`` and only needs symmetric eigensolves.
    """
    if s1.mean.shape != s2.mean.shape:
        raise ValueError(f"dimension mismatch: {s1.mean.size} vs {s2.mean.size}")
    try:
        r1 = _psd_sqrt(s1.cov)
        w = np.linalg.eigvalsh(r1 @ s2.cov @ r1)
    except np.linalg.LinAlgError as err:
        raise ArithmeticError(f"matrix square root failed: {err}") from err
    tr_sqrt = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    diff = s1.mean - s2.mean
    fd = diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * tr_sqrt
    return float(max(fd, 0.0))


def fd_between(x, y) -> float:
    return frechet_distance(GaussStats.from_samples(x), GaussStats.from_samples(y))


def independence_report(v, e_a):
    """``(max |corr|, |corr| matrix [dim v, dim e_A])``."""
    v = np.asarray(v, dtype=np.float64).reshape(len(v), -1)
    e_a = np.asarray(e_a, dtype=np.float64).reshape(len(e_a), -1)
    if len(v) != len(e_a) or len(v) < 2:
        raise ValueError("need equal sample counts >= 2")
    for name, arr in (("v", v), ("e_A", e_a)):
        std = arr.std(axis=0)
        bad = np.flatnonzero(std == 0)
        if bad.size:
            raise ValueError(f"zero-variance column {int(bad[0])} in {name}")
    vc = (v - v.mean(0)) / v.std(0)
    ac = (e_a - e_a.mean(0)) / e_a.std(0)
    corr = np.abs(vc.T @ ac / len(v))
    return float(corr.max()), corr


def gaussian_mi(x, y) -> float:
    """Plug-in mutual information of a joint Gaussian fit to ``(x, y)``."""
    x = np.asarray(x).reshape(len(x), -1)
    y = np.asarray(y).reshape(len(y), -1)
    cov = np.cov(np.hstack([x, y]), rowvar=False)
    dx = x.shape[1]
    ld = lambda m: np.linalg.slogdet(m)[1]  # noqa: E731
    return float(0.5 * (ld(cov[:dx, :dx]) + ld(cov[dx:, dx:]) - ld(cov)))


def gaussian_entropy(cov) -> float:
    cov = np.atleast_2d(cov)
    sign, logdet = np.linalg.slogdet(2.0 * math.pi * math.e * cov)
    if sign <= 0 or not np.isfinite(logdet):
        raise ValueError("singular conditional covariance")
    return 0.5 * float(logdet)


def optimum_nll(world) -> float:
    """Minimum of the entropy-free loss: the conditional entropy H(e_B|e_A)."""
    _, cov = world.conditional(np.zeros(world.dim_a))
    return gaussian_entropy(cov)


def kl_entropy(x, k=1) -> float:
    """Kozachenko-Leonenko nearest-neighbour entropy estimate (nats)."""
    from scipy.spatial import cKDTree
    from scipy.special import digamma, gammaln

    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    dist, _ = cKDTree(x).query(x, k=k + 1)
    eps = dist[:, -1]
    log_unit_ball = (d / 2.0) * math.log(math.pi) - gammaln(d / 2.0 + 1.0)
    return float(digamma(n) - digamma(k) + log_unit_ball + d * np.mean(np.log(eps)))


class MlpBaseline:
    """Deterministic regressor: condition embedding followed by a dense trunk."""

    def __init__(self, dim_in, dim_out, embed_width=64, dim_h=64, trunk_width=128,
                 trunk_depth=4, seed=0):
        rng = Rng(seed)
        self.store = ParamStore()
        self.embed = FeedForward(self.store, "embed", dim_in, dim_h, embed_width, rng,
                                 zero_last=False)
        self.trunk = FeedForward(self.store, "trunk", dim_h, dim_out, trunk_width, rng,
                                 depth=trunk_depth, zero_last=False)

    def __call__(self, e_a):
        return self.trunk(self.embed(e_a))

    def predict(self, e_a):
        with dc.no_grad():
            return self(np.atleast_2d(e_a)).data.copy()

    def fit(self, pair_source, n_steps, batch_size=128, lr=1e-3, seed=0):
        rng = Rng(seed)
        state = AdamState(lr=lr)
        for _ in range(n_steps):
            e_a, e_b = pair_source(rng, batch_size)
            self.store.zero_grad()
            err = dc.sub(self(e_a), e_b)
            dc.backward(dc.mean(dc.sum(dc.square(err), axis=-1)))
            dc.adam_step(state, self.store)
        return self


def matched_mlp(dim_in, dim_out, n_params, embed_width, dim_h, seed=0, trunk_depth=4):
    """Pick the trunk width whose total parameter count is closest to ``n_params``."""
    best = None
    for width in range(4, 1025):
        m = MlpBaseline(dim_in, dim_out, embed_width, dim_h, width, trunk_depth, seed)
        gap = abs(m.store.n_values() - n_params)
        if best is None or gap < best[0]:
            best = (gap, width)
        elif m.store.n_values() > n_params:
            break
    return MlpBaseline(dim_in, dim_out, embed_width, dim_h, best[1], trunk_depth, seed)


def ablation_compare(world, cfg: TrainConfig, n_probe=32, n_samples=512, n_calls=16, seed=0):
    """Train a cINN and a parameter-matched MLP on the same world pairs.

    ``mlp_std`` is the spread over ``n_calls`` repeated calls on one input.
    Returns the report dict with ``cinn_std_ratio``, ``mlp_std``,
    ``cinn_rmse``, ``mlp_rmse`` (conditional-mean errors), plus the
    conditional-sample Frechet distances ``cinn_fd`` and ``mlp_fd``.
    """
    model, _ = train(cfg, world.pairs)
    mlp = matched_mlp(world.dim_a, world.dim_b, model.store.n_values(),
                      cfg.embed_width, cfg.dim_h, seed=cfg.seed)
    mlp.fit(world.pairs, cfg.n_steps, cfg.batch_size, cfg.lr, seed=cfg.seed)

    rng = Rng(seed)
    e_a_probe, _ = world.pairs(rng, n_probe)
    cinn_err, mlp_err, ratios, mlp_stds, cinn_fd, mlp_fd = [], [], [], [], [], []
    for e_a in e_a_probe:
        mean, cov = world.conditional(e_a)
        cond = np.repeat(e_a[None], n_samples, axis=0)
        samples = model.sample(cond, rng.normal((n_samples, world.dim_b)))
        preds = mlp.predict(cond)
        cinn_err.append(samples.mean(0) - mean)
        mlp_err.append(preds[0] - mean)
        # repeated single-input calls; spread about the first call, so identical
        # outputs give exactly 0 (rows of one batch may differ in the last ulp)
        calls = np.stack([mlp.predict(e_a[None])[0] for _ in range(n_calls)])
        mlp_stds.append(float(np.sqrt(np.mean((calls - calls[0]) ** 2, axis=0)).max()))
        oracle_std = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        if np.all(oracle_std > 1e-12):
            ratios.append(np.mean(samples.std(axis=0) / oracle_std))
        truth = GaussStats(mean, cov, n_samples)
        cinn_fd.append(frechet_distance(GaussStats.from_samples(samples), truth))
        mlp_fd.append(frechet_distance(GaussStats.from_samples(preds), truth))
    rmse = lambda e: float(np.sqrt(np.mean(np.square(e))))  # noqa: E731
    return {
        "cinn_std_ratio": float(np.mean(ratios)) if ratios else "n/a",
        "mlp_std": float(max(mlp_stds)),
        "cinn_rmse": rmse(cinn_err),
        "mlp_rmse": rmse(mlp_err),
        "cinn_fd": float(np.mean(cinn_fd)),
        "mlp_fd": float(np.mean(mlp_fd)),
        "cinn_params": model.store.n_values(),
        "mlp_params": mlp.store.n_values(),
    }
