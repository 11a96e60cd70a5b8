"""Conditionally invertible network: coupling, actnorm and permutation blocks
driven by a non-invertible condition embedder."""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Rng, Tensor, as_tensor

LOG_SCALE_CLAMP = 2.0


class FeedForward:
    """Dense net with leaky-ReLU hidden layers and a linear output."""

    def __init__(self, store: ParamStore, prefix: str, n_in: int, n_out: int,
                 width: int, rng: Rng, depth: int = 2, zero_last: bool = True):
        sizes = [n_in] + [width] * depth + [n_out]
        self.weights, self.biases = [], []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((a, b))
            else:
                w = rng.normal((a, b)) * math.sqrt(2.0 / a)
            self.weights.append(store.add(f"{prefix}.W{i}", w))
            self.biases.append(store.add(f"{prefix}.b{i}", np.zeros(b)))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x):
        x = as_tensor(x)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = dc.add(dc.matmul(x, w), b)
            if i < n - 1:
                x = dc.leaky_relu(x)
        return x


class Coupling:
    """Alternating conditional affine coupling.

    The first pass rescales and shifts ``z[d:]`` from ``[z[:d], h]``; the
    second rescales and shifts ``z[:d]`` from ``[z'[d:], h]``.  Log-scales are
    ``alpha * tanh(raw)`` so every scale lies in ``[e^-alpha, e^alpha]``.
    """

    def __init__(self, store, prefix, dim, dim_h, width, rng, alpha=LOG_SCALE_CLAMP):
        if dim < 2:
            raise ValueError("coupling needs dim >= 2")
        self.dim, self.dim_h, self.alpha = dim, dim_h, alpha
        self.d = d = dim // 2
        self.s1 = FeedForward(store, f"{prefix}.s1", d + dim_h, dim - d, width, rng)
        self.t1 = FeedForward(store, f"{prefix}.t1", d + dim_h, dim - d, width, rng)
        self.s2 = FeedForward(store, f"{prefix}.s2", dim - d + dim_h, d, width, rng)
        self.t2 = FeedForward(store, f"{prefix}.t2", dim - d + dim_h, d, width, rng)

    def _check(self, z, h):
        if z.shape[-1] != self.dim or h.shape[-1] != self.dim_h or z.shape[0] != h.shape[0]:
            raise ValueError(f"coupling expects z[B,{self.dim}], h[B,{self.dim_h}]; "
                             f"got {z.shape}, {h.shape}")

    def _affine(self, s_net, t_net, passive, h):
        inp = dc.concat([passive, h])
        log_s = dc.mul(dc.tanh(s_net(inp)), self.alpha)
        return log_s, t_net(inp)

    def forward(self, z, h):
        z, h = as_tensor(z), as_tensor(h)
        self._check(z, h)
        z1, z2 = dc.split(z, self.d)
        ls1, t1 = self._affine(self.s1, self.t1, z1, h)
        z2 = dc.add(dc.mul(dc.exp(ls1), z2), t1)
        ls2, t2 = self._affine(self.s2, self.t2, z2, h)
        z1 = dc.add(dc.mul(dc.exp(ls2), z1), t2)
        logdet = dc.add(dc.sum(ls1, axis=-1), dc.sum(ls2, axis=-1))
        return dc.concat([z1, z2]), logdet

    def inverse(self, z, h):
        z, h = as_tensor(z), as_tensor(h)
        self._check(z, h)
        z1, z2 = dc.split(z, self.d)
        ls2, t2 = self._affine(self.s2, self.t2, z2, h)
        z1 = dc.mul(dc.sub(z1, t2), dc.exp(dc.neg(ls2)))
        ls1, t1 = self._affine(self.s1, self.t1, z1, h)
        z2 = dc.mul(dc.sub(z2, t1), dc.exp(dc.neg(ls1)))
        logdet = dc.neg(dc.add(dc.sum(ls1, axis=-1), dc.sum(ls2, axis=-1)))
        return dc.concat([z1, z2]), logdet


class NotInitializedError(RuntimeError):
    pass


class ActNorm:
    """Per-channel ``exp(log_scale) * z + bias``."""

    def __init__(self, store, prefix, dim):
        self.dim = dim
        self.log_scale = store.add(f"{prefix}.log_scale", np.zeros(dim))
        self.bias = store.add(f"{prefix}.bias", np.zeros(dim))
        self.initialized = False

    def initialize(self, batch, direction="forward"):
        """Data-dependent init so the layer's output on ``batch`` is standardised.

        ``direction="forward"`` standardises ``forward(batch)``;
        ``"inverse"`` standardises ``inverse(batch)``.
        """
        batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
        mu = batch.mean(axis=0)
        std = batch.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        if direction == "forward":
            self.log_scale.data[...] = -np.log(std)
            self.bias.data[...] = -mu / std
        elif direction == "inverse":
            self.log_scale.data[...] = np.log(std)
            self.bias.data[...] = mu
        else:
            raise ValueError(f"unknown direction {direction!r}")
        self.initialized = True

    def _require_init(self):
        if not self.initialized:
            raise NotInitializedError("actnorm used before initialization")

    def forward(self, z):
        self._require_init()
        z = as_tensor(z)
        out = dc.add(dc.mul(dc.exp(self.log_scale), z), self.bias)
        logdet = dc.mul(dc.sum(self.log_scale), np.ones(z.shape[0]))
        return out, logdet

    def inverse(self, z):
        self._require_init()
        z = as_tensor(z)
        out = dc.mul(dc.sub(z, self.bias), dc.exp(dc.neg(self.log_scale)))
        logdet = dc.mul(dc.neg(dc.sum(self.log_scale)), np.ones(z.shape[0]))
        return out, logdet


class Permutation:
    def __init__(self, perm):
        perm = np.asarray(perm, dtype=np.int64)
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError(f"not a permutation: {perm.tolist()}")
        self.perm = perm
        self.inv = np.argsort(perm)

    def forward(self, z):
        return dc.take(as_tensor(z), self.perm)

    def inverse(self, z):
        return dc.take(as_tensor(z), self.inv)


class Block:
    def __init__(self, coupling, actnorm, permutation):
        self.coupling = coupling
        self.actnorm = actnorm
        self.permutation = permutation


class CinnModel:
    """Stack of (coupling, actnorm, permutation) blocks plus embedder ``H``.

    ``forward`` maps a residual ``v`` to ``e_B`` given the condition;
    ``inverse`` maps ``e_B`` back to ``v``.  Both return per-sample log-dets.
    """

    def __init__(self, dim, dim_cond, n_blocks=6, hidden_width=128, embed_width=64,
                 dim_h=64, seed=0, alpha=LOG_SCALE_CLAMP, perms=None):
        self.dim, self.dim_cond, self.n_blocks = dim, dim_cond, n_blocks
        self.hidden_width, self.embed_width, self.dim_h = hidden_width, embed_width, dim_h
        self.alpha, self.seed = alpha, seed
        rng = Rng(seed)
        self.store = ParamStore()
        self.embedder = FeedForward(self.store, "embed", dim_cond, dim_h, embed_width,
                                    rng, zero_last=False)
        self.blocks = []
        for i in range(n_blocks):
            coupling = Coupling(self.store, f"block{i}.coupling", dim, dim_h,
                                hidden_width, rng, alpha)
            actnorm = ActNorm(self.store, f"block{i}.actnorm", dim)
            perm = rng.permutation(dim) if perms is None else perms[i]
            self.blocks.append(Block(coupling, actnorm, Permutation(perm)))

    @property
    def permutations(self):
        return [b.permutation.perm.copy() for b in self.blocks]

    @property
    def initialized(self):
        return all(b.actnorm.initialized for b in self.blocks)

    def architecture(self) -> dict:
        return {"dim": self.dim, "dim_cond": self.dim_cond, "dim_h": self.dim_h,
                "n_blocks": self.n_blocks, "hidden_width": self.hidden_width,
                "embed_width": self.embed_width, "alpha": self.alpha}

    def mark_initialized(self):
        """Accept actnorm's current values (identity by default) as initialized."""
        for b in self.blocks:
            b.actnorm.initialized = True

    def embed(self, cond):
        cond = as_tensor(cond)
        if cond.data.ndim != 2 or cond.shape[-1] != self.dim_cond:
            raise ValueError(f"condition must be [B,{self.dim_cond}], got {cond.shape}")
        return self.embedder(cond)

    def _check_input(self, x):
        x = as_tensor(x)
        if x.data.ndim != 2 or x.shape[-1] != self.dim:
            raise ValueError(f"input must be [B,{self.dim}], got {x.shape}")
        return x

    def forward(self, v, cond):
        z = self._check_input(v)
        h = self.embed(cond)
        logdet = dc.Tensor(np.zeros(z.shape[0]))
        for b in self.blocks:
            z, ld = b.coupling.forward(z, h)
            logdet = dc.add(logdet, ld)
            z, ld = b.actnorm.forward(z)
            logdet = dc.add(logdet, ld)
            z = b.permutation.forward(z)
        return z, logdet

    def inverse(self, e_b, cond):
        z = self._check_input(e_b)
        h = self.embed(cond)
        logdet = dc.Tensor(np.zeros(z.shape[0]))
        for b in reversed(self.blocks):
            z = b.permutation.inverse(z)
            z, ld = b.actnorm.inverse(z)
            logdet = dc.add(logdet, ld)
            z, ld = b.coupling.inverse(z, h)
            logdet = dc.add(logdet, ld)
        return z, logdet

    def data_init(self, e_b, cond):
        """Initialise every actnorm so the inverse pass standardises ``e_b``."""
        with dc.no_grad():
            z = self._check_input(e_b)
            h = self.embed(cond)
            for b in reversed(self.blocks):
                z = b.permutation.inverse(z)
                b.actnorm.initialize(z.data, direction="inverse")
                z, _ = b.actnorm.inverse(z)
                z, _ = b.coupling.inverse(z, h)

    # numpy conveniences used by tasks and evaluation
    def sample(self, cond, v):
        with dc.no_grad():
            return self.forward(v, cond)[0].data.copy()

    def residual(self, e_b, cond):
        with dc.no_grad():
            return self.inverse(e_b, cond)[0].data.copy()


def cinn_forward(v, cond, m: CinnModel):
    return m.forward(v, cond)


def cinn_inverse(e_b, cond, m: CinnModel):
    return m.inverse(e_b, cond)


def coupling_forward(z, h, p: Coupling):
    return p.forward(z, h)


def coupling_inverse(z, h, p: Coupling):
    return p.inverse(z, h)


def randomize(model: CinnModel, rng: Rng, scale: float = 0.1):
    """Give every coupling a non-trivial output layer and every actnorm a
    random affine map; used to probe non-identity models in tests.

    Hidden layers keep their He initialisation, and the output layers are
    drawn with std ``scale / sqrt(fan_in)`` so activations stay O(1).
    """
    for b in model.blocks:
        for net in (b.coupling.s1, b.coupling.t1, b.coupling.s2, b.coupling.t2):
            w, bias = net.weights[-1], net.biases[-1]
            w.data[...] = scale * rng.normal(w.data.shape) / math.sqrt(w.data.shape[0])
            bias.data[...] = scale * rng.normal(bias.data.shape)
        b.actnorm.log_scale.data[...] = scale * rng.normal(model.dim)
        b.actnorm.bias.data[...] = scale * rng.normal(model.dim)
    model.mark_initialized()
    return model
