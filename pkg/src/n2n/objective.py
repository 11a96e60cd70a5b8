"""Negative log-likelihood training of the translator and the mutual
information bound it implies."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, LOG_2PI, NonFiniteError
from .flownet import CinnModel

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    """Batch-mean loss terms.  The constant data entropy is not included."""
    nll_prior: float
    neg_logdet: float
    total: float


@dataclass
class TrainConfig:
    n_steps: int = 5000
    batch_size: int = 128
    lr: float = 1e-3
    n_blocks: int = 6
    hidden_width: int = 128
    embed_width: int = 64
    dim_h: int = 64
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        for key in ("batch_size", "n_blocks", "hidden_width", "embed_width", "dim_h", "eval_every"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.n_steps < 0 or self.lr <= 0:
            raise ValueError("n_steps must be >= 0 and lr > 0")

    def to_dict(self):
        return asdict(self)


def nll_terms(e_a, e_b, m: CinnModel):
    """Differentiable ``(total, nll_prior, neg_logdet)`` tensors."""
    v, logdet = m.inverse(e_b, e_a)
    per_sample = dc.add(dc.mul(dc.sum(dc.square(v), axis=-1), 0.5), 0.5 * m.dim * LOG_2PI)
    nll_prior = dc.mean(per_sample)
    neg_logdet = dc.neg(dc.mean(logdet))
    return dc.add(nll_prior, neg_logdet), nll_prior, neg_logdet


def nll_loss(e_a, e_b, m: CinnModel) -> LossBreakdown:
    with dc.no_grad():
        total, prior, neg_ld = nll_terms(e_a, e_b, m)
    return LossBreakdown(prior.item(), neg_ld.item(), total.item())


def log_density(e_a, e_b, m: CinnModel) -> np.ndarray:
    """Per-sample log density of ``e_b`` under the flow given ``e_a``."""
    with dc.no_grad():
        v, logdet = m.inverse(e_b, e_a)
    v = v.data
    return -0.5 * np.sum(v * v, axis=-1) - 0.5 * m.dim * LOG_2PI + logdet.data


def mi_upper_bound(e_a, e_b, m: CinnModel, entropy: float | None = None):
    """Estimate of E_{e_A} KL(p(v|e_A) || q(v)), which bounds I(v, e_A).

    ``entropy`` is the conditional data entropy H(e_B|e_A).  Without it the
    entropy-free loss is returned and the second element of the result is
    ``False`` to flag that it is only a surrogate.
    """
    total = nll_loss(e_a, e_b, m).total
    if entropy is None:
        return total, False
    return total - entropy, True


class DivergenceError(NonFiniteError):
    def __init__(self, step, msg):
        super().__init__(f"training diverged at step {step}: {msg}")
        self.step = step


def train(cfg: TrainConfig, pair_source, model: CinnModel | None = None, dim=None,
          dim_cond=None, callback=None):
    """Fit a translator by minimising the batch-mean NLL with Adam.

    ``pair_source(rng, batch_size)`` returns an ``(e_a, e_b)`` numpy pair.
    Returns ``(model, history)`` where history rows are
    ``(step, LossBreakdown)``, recorded every ``eval_every`` steps and at the
    final step.
    """
    rng = dc.Rng(cfg.seed)
    data_rng = rng.fork()
    e_a, e_b = pair_source(data_rng, cfg.batch_size)
    if model is None:
        model = CinnModel(dim or e_b.shape[1], dim_cond or e_a.shape[1],
                          n_blocks=cfg.n_blocks, hidden_width=cfg.hidden_width,
                          embed_width=cfg.embed_width, dim_h=cfg.dim_h,
                          seed=int(rng.raw(1)[0]))
    if not model.initialized:
        model.data_init(e_b, e_a)
    state = AdamState(lr=cfg.lr)
    history = []
    store = model.store
    for step in range(1, cfg.n_steps + 1):
        if step > 1:
            e_a, e_b = pair_source(data_rng, cfg.batch_size)
        store.zero_grad()
        try:
            total, prior, neg_ld = nll_terms(e_a, e_b, model)
            dc.backward(total)
            dc.adam_step(state, store)
        except NonFiniteError as err:
            raise DivergenceError(step, str(err)) from err
        if step % cfg.eval_every == 0 or step == cfg.n_steps:
            row = LossBreakdown(prior.item(), neg_ld.item(), total.item())
            history.append((step, row))
            log.debug("step %d total %.4f", step, row.total)
            if callback is not None:
                callback(step, row)
    return model, history


def format_loss_csv(history) -> str:
    lines = ["step,total,nll_prior,neg_logdet"]
    for step, row in history:
        lines.append(f"{step},{row.total:.6f},{row.nll_prior:.6f},{row.neg_logdet:.6f}")
    return "\n".join(lines) + "\n"
