"""Frozen layered experts whose intermediate activations can be tapped."""
from __future__ import annotations

import numpy as np

from .. import diffcore as dc
from ..diffcore import AdamState, ParamStore, Rng
from ..flownet import FeedForward


class FrozenNet:
    """A sequence of fixed numpy layers.  Tap 0 is the flattened input."""

    def __init__(self, layers, names=None):
        self.layers = list(layers)
        self.names = list(names) if names is not None else [f"layer{i}" for i in range(len(layers))]

    @property
    def depth(self):
        return len(self.layers)

    def tap(self, layer_index, x):
        if not 0 <= layer_index <= self.depth:
            raise IndexError(f"layer index {layer_index} outside [0, {self.depth}]")
        out = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = out.reshape(out.shape[0], -1)
        for layer in self.layers[:layer_index]:
            out = layer(out)
        return out

    def __call__(self, x):
        return self.tap(self.depth, x)


def expert_tap(model: FrozenNet, layer_index, x):
    return model.tap(layer_index, x)


def avg_pool(size, window):
    """Non-overlapping ``window x window`` average pooling on flat HWC images."""
    cells = size // window

    def pool(x):
        img = x.reshape(x.shape[0], cells, window, cells, window, 3)
        return img.mean(axis=(2, 4)).reshape(x.shape[0], -1)

    return pool


def train_attribute_classifier(world, n_steps=1500, lr=1e-2, width=32, seed=0, pool_window=4):
    """Toy attribute classifier: average pooling, then a small trained MLP head.

    Taps: 0 = pixels (S*S*3), 1 = pooled features, 2 = attribute logits.
    Pooling keeps colour and covered area but blurs position within a cell;
    the logits keep only hue and size.
    """
    pool = avg_pool(world.size, pool_window)
    feats = pool(world.templates)
    targets = world.attribute_bits(world.attrs)
    rng = Rng(seed)
    store = ParamStore()
    head = FeedForward(store, "head", feats.shape[1], targets.shape[1], width, rng,
                       depth=1, zero_last=False)
    state = AdamState(lr=lr)
    for _ in range(n_steps):
        store.zero_grad()
        logits = head(feats)
        # binary cross-entropy: softplus(l) - t * l
        loss = dc.mean(dc.sub(dc.softplus(logits), dc.mul(logits, targets)))
        dc.backward(loss)
        dc.adam_step(state, store)
    store.freeze()

    def logits(x):
        with dc.no_grad():
            return head(x).data.copy()

    return FrozenNet([pool, logits], names=["pool", "logits"])
