"""Transfer procedures built from frozen experts and a trained translator.

Every task works on numpy arrays.  ``phi``/``theta`` are encoders, ``lam``
is the decoder of the target expert and ``tau`` is a trained ``CinnModel``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .diffcore import Rng
from .experts.toyimage import ToyImageWorld, _atomic_write, deform
from .flownet import CinnModel


@dataclass(frozen=True)
class TranslationRequest:
    x: np.ndarray
    n: int = 1
    seed: int = 0
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.v is not None and self.n != 1:
            raise ValueError("a fixed residual can only produce a single sample (n must be 1)")


def _rows(x):
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _check_dims(tau: CinnModel, cond, code=None):
    if cond.shape[-1] != tau.dim_cond:
        raise ValueError(f"condition has dim {cond.shape[-1]}, translator expects {tau.dim_cond}")
    if code is not None and code.shape[-1] != tau.dim:
        raise ValueError(f"code has dim {code.shape[-1]}, translator expects {tau.dim}")


def transfer_code(e_b, cond_from, cond_to, tau: CinnModel):
    """``tau(tau^-1(e_b | cond_from) | cond_to)`` row by row."""
    e_b, cond_from, cond_to = _rows(e_b), _rows(cond_from), _rows(cond_to)
    _check_dims(tau, cond_from, e_b)
    _check_dims(tau, cond_to)
    v = tau.residual(e_b, cond_from)
    return tau.sample(cond_to, v)


def translate(req: TranslationRequest, phi, tau: CinnModel, lam, return_code=False):
    """Sample ``n`` translations of a single input ``req.x``."""
    e_a = _rows(phi(req.x))
    if len(e_a) != 1:
        raise ValueError("translate expects a single source input")
    _check_dims(tau, e_a)
    if req.v is not None:
        v = _rows(req.v)
    else:
        v = Rng(req.seed).normal((req.n, tau.dim))
    _check_dims(tau, e_a, v)
    e_b = tau.sample(np.repeat(e_a, len(v), axis=0), v)
    y = lam(e_b)
    return (y, e_b) if return_code else y


def modify_attributes(y, a, a_star, theta, tau: CinnModel, lam, return_code=False):
    a, a_star = _rows(a), _rows(a_star)
    if a.shape != a_star.shape:
        raise ValueError(f"attribute shapes differ: {a.shape} vs {a_star.shape}")
    e_b = transfer_code(theta(y), a, a_star, tau)
    y_star = lam(e_b)
    return (y_star, e_b) if return_code else y_star


def exemplar_swap(x_content, y_style, phi, theta, tau: CinnModel, lam, return_code=False):
    """Residual of ``y_style`` (under its own condition) re-applied under ``x_content``."""
    e_b = transfer_code(theta(y_style), phi(y_style), phi(x_content), tau)
    y_star = lam(e_b)
    return (y_star, e_b) if return_code else y_star


def unpaired_translate(y, from_set, to_set, theta, tau: CinnModel, lam, return_code=False):
    code = _rows(theta(y))
    sets = []
    for s in (from_set, to_set):
        s = np.broadcast_to(np.asarray(s), (len(code),))
        if not np.all(np.isin(s, (0, 1))):
            raise ValueError("set indicator must be 0 or 1")
        sets.append(s.astype(np.float64)[:, None])
    e_b = transfer_code(code, sets[0], sets[1], tau)
    y_star = lam(e_b)
    return (y_star, e_b) if return_code else y_star


def disentangle_swap(y_shape, x_appearance, theta, tau: CinnModel, lam, return_code=False):
    code = theta(y_shape)
    e_b = transfer_code(code, code, theta(x_appearance), tau)
    y_star = lam(e_b)
    return (y_star, e_b) if return_code else y_star


def invariance_spectrum(expert, layer_indices, x_probe, taus, lam, n=32, seed=0):
    """Mean per-output standard deviation over ``n`` translations per probe.

    ``taus`` maps each layer index to the translator trained on that tap.
    """
    out = []
    x_probe = _rows(x_probe)
    for layer in layer_indices:
        if layer not in taus:
            raise KeyError(f"no trained translator for layer {layer}")
        tau = taus[layer]
        taps = expert.tap(layer, x_probe) if hasattr(expert, "tap") else expert(layer, x_probe)
        rng = Rng(seed)
        spreads = []
        for cond in taps:
            y = lam(tau.sample(np.repeat(cond[None], n, axis=0), rng.normal((n, tau.dim))))
            spreads.append(np.mean(np.std(y, axis=0)))
        out.append(float(np.mean(spreads)))
    return out


# -- toy-world pair sources ----------------------------------------------------

def _code_pairs(world: ToyImageWorld, vae, condition, hues=None):
    """``(condition(images, attrs, rng), sampled VAE code)`` pairs."""
    def source(rng: Rng, n):
        images, attrs = world.sample(rng, n, hues)
        e_a = condition(images, attrs, rng)
        return e_a, vae.encode_sample(images, rng)
    return source


def attribute_pairs(world: ToyImageWorld, vae):
    return _code_pairs(world, vae, lambda img, attrs, rng: world.attribute_bits(attrs))


def content_pairs(world: ToyImageWorld, vae):
    return _code_pairs(world, vae, lambda img, attrs, rng: world.content_moments(img))


def set_pairs(world: ToyImageWorld, vae, hues=(0, 2)):
    """Set 0 holds hue ``hues[0]`` images, set 1 holds ``hues[1]``."""
    return _code_pairs(world, vae, lambda img, attrs, rng: (attrs[:, 3:4] == hues[1]).astype(float),
                       hues=list(hues))


def deform_pairs(world: ToyImageWorld, vae, max_shift=2):
    def cond(images, attrs, rng):
        warped = np.stack([deform(im, rng, world.size, max_shift) for im in images])
        return vae.encode_mean(warped)
    return _code_pairs(world, vae, cond)


def tap_pairs(world: ToyImageWorld, vae, expert, layer):
    return _code_pairs(world, vae, lambda img, attrs, rng: expert.tap(layer, img))


# -- output -------------------------------------------------------------------

def write_task_output(directory, task, world: ToyImageWorld, images, seeds: dict,
                      checkpoint=None, extra=None):
    """Dataset dump of ``images`` (attributes read back by the renderer inverse)
    plus ``manifest.json``."""
    images = _rows(images)
    attrs = world.classify(images)
    offsets = world.dump(directory, images, attrs)
    manifest = {
        "task": task,
        "seeds": seeds,
        "checkpoint": checkpoint,
        "n_samples": len(images),
        "sample_bytes": world.image_dim,
        "offsets": offsets,
    }
    if extra:
        manifest.update(extra)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    _atomic_write(os.path.join(directory, "manifest.json"), text.encode("utf-8"))
    return manifest
