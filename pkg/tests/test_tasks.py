import json

import numpy as np
import pytest

from helpers import random_model
from n2n import tasks
from n2n.diffcore import Rng
from n2n.experts.gaussian import GaussianWorld
from n2n.experts.toyimage import ToyImageWorld, load_dump
from n2n.objective import TrainConfig, train
from n2n.tasks import TranslationRequest

ident = lambda x: np.atleast_2d(np.asarray(x, dtype=np.float64))  # noqa: E731


@pytest.fixture(scope="module")
def tau():
    return random_model(4, 3, n_blocks=4, seed=11)


def test_request_rejects_fixed_residual_with_many_samples():
    with pytest.raises(ValueError):
        TranslationRequest(np.zeros(3), n=2, v=np.zeros(4))
    with pytest.raises(ValueError):
        TranslationRequest(np.zeros(3), n=0)


def test_translate_fixed_zero_residual_is_deterministic(tau):
    req = TranslationRequest(np.ones(3), v=np.zeros(4))
    y1 = tasks.translate(req, ident, tau, ident)
    y2 = tasks.translate(req, ident, tau, ident)
    assert y1.shape == (1, 4)
    assert y1.tobytes() == y2.tobytes()
    np.testing.assert_array_equal(y1, tau.sample(np.ones((1, 3)), np.zeros((1, 4))))


def test_translate_same_seed_same_triples(tau):
    req = TranslationRequest(np.ones(3), n=3, seed=5)
    a = tasks.translate(req, ident, tau, ident)
    b = tasks.translate(req, ident, tau, ident)
    assert a.shape == (3, 4)
    assert a.tobytes() == b.tobytes()
    c = tasks.translate(TranslationRequest(np.ones(3), n=3, seed=6), ident, tau, ident)
    assert not np.array_equal(a, c)


def test_translate_dimension_mismatch(tau):
    with pytest.raises(ValueError, match="condition"):
        tasks.translate(TranslationRequest(np.ones(5)), ident, tau, ident)
    with pytest.raises(ValueError, match="code"):
        tasks.translate(TranslationRequest(np.ones(3), v=np.zeros(2)), ident, tau, ident)


def test_modify_same_attributes_returns_code(tau):
    rng = Rng(0)
    code, a = rng.normal((64, 4)), rng.normal((64, 3))
    _, e_b = tasks.modify_attributes(code, a, a, ident, tau, ident, return_code=True)
    assert np.max(np.abs(e_b - code)) < 1e-8


def test_modify_double_flip(tau):
    rng = Rng(1)
    code = rng.normal((64, 4))
    a = (rng.uniform((64, 3)) < 0.5).astype(float)
    flipped = a.copy()
    flipped[:, 0] = 1 - flipped[:, 0]
    _, e1 = tasks.modify_attributes(code, a, flipped, ident, tau, ident, return_code=True)
    assert np.max(np.abs(e1 - code)) > 1e-3
    _, e2 = tasks.modify_attributes(e1, flipped, a, ident, tau, ident, return_code=True)
    assert np.max(np.abs(e2 - code)) < 1e-8


def test_modify_length_mismatch(tau):
    with pytest.raises(ValueError, match="attribute"):
        tasks.modify_attributes(np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((2, 2)),
                                ident, tau, ident)


def content_of(y):
    return ident(y)[:, :3]


def test_exemplar_self_swap(tau):
    y = Rng(2).normal((32, 4))
    _, e_b = tasks.exemplar_swap(y, y, content_of, ident, tau, ident, return_code=True)
    assert np.max(np.abs(e_b - y)) < 1e-8


def test_exemplar_swap_and_back(tau):
    # with a lossless content readout the swapped output carries x's condition,
    # so swapping back under the reversed roles restores y's code
    rng = Rng(3)
    x, y = rng.normal((32, 4)), rng.normal((32, 4))
    e1 = tasks.transfer_code(y, content_of(y), content_of(x), tau)
    e2 = tasks.transfer_code(e1, content_of(x), content_of(y), tau)
    assert np.max(np.abs(e2 - y)) < 1e-6


def test_unpaired_same_set_round_trip():
    tau1 = random_model(4, 1, n_blocks=3, seed=4)
    y = Rng(4).normal((32, 4))
    for s in (0, 1):
        _, e_b = tasks.unpaired_translate(y, s, s, ident, tau1, ident, return_code=True)
        assert np.max(np.abs(e_b - y)) < 1e-8
    _, e_b = tasks.unpaired_translate(y, 0, 1, ident, tau1, ident, return_code=True)
    assert np.max(np.abs(e_b - y)) > 1e-3


def test_unpaired_rejects_bad_indicator():
    tau1 = random_model(4, 1, n_blocks=2)
    with pytest.raises(ValueError, match="0 or 1"):
        tasks.unpaired_translate(np.zeros((2, 4)), 0, 2, ident, tau1, ident)


def test_disentangle_self_swap():
    tau4 = random_model(4, 4, n_blocks=3, seed=6)
    y = Rng(6).normal((32, 4))
    _, e_b = tasks.disentangle_swap(y, y, ident, tau4, ident, return_code=True)
    assert np.max(np.abs(e_b - y)) < 1e-6


def test_invariance_spectrum_missing_layer(tau):
    with pytest.raises(KeyError, match="layer 2"):
        tasks.invariance_spectrum(lambda i, x: ident(x), [1, 2], np.zeros((2, 3)), {1: tau}, ident)


def quick_cfg(**kw):
    base = dict(n_steps=200, batch_size=128, n_blocks=2, hidden_width=16, embed_width=8,
                dim_h=4, seed=1, eval_every=100, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_invariance_constant_condition_matches_marginal():
    world = GaussianWorld.random(7)

    def const_pairs(rng, n):
        _, e_b = world.pairs(rng, n)
        return np.zeros((n, 1)), e_b

    model, _ = train(quick_cfg(), const_pairs)
    spread = tasks.invariance_spectrum(lambda i, x: np.zeros((len(x), 1)), [0], np.zeros((8, 1)),
                                       {0: model}, ident, n=4096)[0]
    _, e_b = world.pairs(Rng(3), 100_000)
    marginal = np.mean(np.std(e_b, axis=0))
    assert spread == pytest.approx(marginal, rel=0.1)


def test_invariance_lossless_condition_is_tight():
    # e_B is a fixed function of e_A up to a tiny noise floor
    world = GaussianWorld.linear(np.eye(4), np.eye(4) * 2.0, sigma_y=0.05)
    model, _ = train(quick_cfg(n_steps=3000, n_blocks=4, hidden_width=32, lr=3e-3), world.pairs)
    e_a, _ = world.pairs(Rng(3), 8)
    lossless = tasks.invariance_spectrum(lambda i, x: x, [0], e_a, {0: model}, ident, n=256)[0]
    _, e_b = world.pairs(Rng(3), 100_000)
    assert lossless < 0.1 * np.mean(np.std(e_b, axis=0))


def test_spectrum_is_deterministic(tau):
    probe = Rng(7).normal((4, 3))
    kw = dict(n=8, seed=3)
    a = tasks.invariance_spectrum(lambda i, x: x, [0], probe, {0: tau}, ident, **kw)
    b = tasks.invariance_spectrum(lambda i, x: x, [0], probe, {0: tau}, ident, **kw)
    assert a == b


def test_write_task_output(tmp_path):
    world = ToyImageWorld()
    images, attrs = world.sample(Rng(0), 5)
    man = tasks.write_task_output(str(tmp_path), "modify", world, images, {"tau": 1},
                                  checkpoint="ck", extra={"hue_rate": 1.0})
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == man
    assert on_disk["task"] == "modify" and on_disk["n_samples"] == 5
    assert len(on_disk["offsets"]) == 5
    back, back_attrs = load_dump(str(tmp_path), world.image_dim)
    np.testing.assert_array_equal(back_attrs, attrs)
