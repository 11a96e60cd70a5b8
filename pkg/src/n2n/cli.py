"""Command-line entry point: ``n2n <task> --config cfg.json [--out DIR]
[--seed N] [--ckpt PATH]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 I/O error.  Diagnostics go to stderr; results are written to files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import diffcore as dc
from . import evalkit, tasks
from .checkpoint import (CheckpointError, _atomic_write, load_checkpoint, load_into,
                         read_manifest, save_checkpoint, save_store)
from .diffcore import NonFiniteError, Rng
from .experts.classifier import train_attribute_classifier
from .experts.gaussian import GaussianWorld
from .experts.toyimage import ToyImageWorld
from .experts.vae import ToyVae, train_toy_vae
from .flownet import CinnModel, randomize
from .objective import TrainConfig, format_loss_csv, mi_upper_bound, nll_loss, train

log = logging.getLogger("n2n")

TASKS = ("train", "translate", "modify", "exemplar", "unpaired", "disentangle",
         "diagnose", "ablation", "gradcheck", "eval")
TOY_TASKS = ("modify", "exemplar", "unpaired", "disentangle", "diagnose")
TOP_KEYS = {"task", "world", "model", "train", "io", "task_args"}
MODEL_KEYS = {"n_blocks", "hidden_width", "embed_width", "dim_h"}
TRAIN_KEYS = {"n_steps", "batch_size", "lr", "seed", "eval_every"}
IO_KEYS = {"out_dir", "checkpoint", "vae_checkpoint"}
GAUSS_KEYS = {"kind", "variant", "seed", "k", "dim_x", "dim_y", "sigma_x", "sigma_y", "dim"}
TOY_KEYS = {"kind", "seed", "condition", "vae_latent", "vae_width", "vae_steps",
            "vae_kl_weight", "deform_shift"}
CONDITIONS = ("attributes", "content", "set", "deform")
TASK_ARG_KEYS = {
    "translate": {"n", "x", "probe_seed"},
    "modify": {"n_probe", "bit"},
    "exemplar": {"n_probe"},
    "unpaired": {"n_probe", "hues"},
    "disentangle": {"n_probe"},
    "diagnose": {"n_probe", "n", "layers"},
    "ablation": {"n_probe", "n_samples"},
    "gradcheck": {"dim", "n_blocks", "batch", "step"},
    "eval": {"n_probe"},
    "train": set(),
}


class ConfigError(ValueError):
    pass


def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError(f"`{where}` must be a JSON object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key `{where}.{unknown[0]}`")


def validate_config(cfg: dict, task: str | None = None) -> dict:
    """Reject unknown keys and fill defaults.  Raises ``ConfigError``."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(cfg, TOP_KEYS, "config")
    if "task" not in cfg:
        raise ConfigError("missing required key `task`")
    if cfg["task"] not in TASKS:
        raise ConfigError(f"`task` must be one of {', '.join(TASKS)}")
    if task is not None and task != cfg["task"]:
        raise ConfigError(f"`task` in config is {cfg['task']!r} but the command is {task!r}")
    task = cfg["task"]
    out = {"task": task}

    world = dict(cfg.get("world", {"kind": "toyimage" if task in TOY_TASKS else "gaussian"}))
    kind = world.get("kind")
    if kind == "gaussian":
        _check_keys(world, GAUSS_KEYS, "world")
        world = {"variant": "random", "seed": 7, "k": 4, "dim_x": 4, "dim_y": 4,
                 "sigma_x": 0.3, "sigma_y": 0.3, "dim": 4, **world}
        if world["variant"] not in ("random", "ambiguous", "deterministic"):
            raise ConfigError("`world.variant` must be random, ambiguous or deterministic")
    elif kind == "toyimage":
        _check_keys(world, TOY_KEYS, "world")
        world = {"seed": 0, "condition": "attributes", "vae_latent": 6, "vae_width": 256,
                 "vae_steps": 6000, "vae_kl_weight": 0.02, "deform_shift": 4, **world}
        if world["condition"] not in CONDITIONS:
            raise ConfigError(f"`world.condition` must be one of {', '.join(CONDITIONS)}")
    else:
        raise ConfigError("`world.kind` must be gaussian or toyimage")
    if task in TOY_TASKS and kind != "toyimage":
        raise ConfigError(f"task {task!r} needs `world.kind` = toyimage")
    if task in ("ablation", "eval", "translate") and kind != "gaussian":
        raise ConfigError(f"task {task!r} needs `world.kind` = gaussian")
    out["world"] = world

    model = cfg.get("model", {})
    _check_keys(model, MODEL_KEYS, "model")
    trn = cfg.get("train", {})
    _check_keys(trn, TRAIN_KEYS, "train")
    merged = {"n_blocks": 6, "hidden_width": 64, "embed_width": 32, "dim_h": 32,
              "n_steps": 5000, "batch_size": 128, "lr": 1e-3, "seed": 0, "eval_every": 50,
              **model, **trn}
    try:
        out["train"] = TrainConfig(**merged)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid `train`/`model` value: {err}") from err

    io = cfg.get("io", {})
    _check_keys(io, IO_KEYS, "io")
    out["io"] = dict(io)
    args = cfg.get("task_args", {})
    _check_keys(args, TASK_ARG_KEYS[task], "task_args")
    out["task_args"] = dict(args)
    return out


# -- helpers -------------------------------------------------------------------

def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    _atomic_write(path, text.encode("utf-8"))


def _write_text(path, text):
    _atomic_write(path, text.encode("utf-8"))


def build_gaussian(w: dict) -> GaussianWorld:
    if w["variant"] == "ambiguous":
        return GaussianWorld.ambiguous(w["dim"], w["seed"])
    if w["variant"] == "deterministic":
        return GaussianWorld.deterministic(w["dim"], w["seed"])
    return GaussianWorld.random(w["seed"], w["k"], w["dim_x"], w["dim_y"],
                                w["sigma_x"], w["sigma_y"])


def toy_vae(w: dict, world: ToyImageWorld, path=None) -> ToyVae:
    """Train the frozen toy VAE, or load it from ``path`` if one was saved there."""
    arch = {"data_dim": world.image_dim, "latent_dim": w["vae_latent"], "width": w["vae_width"]}
    if path and os.path.exists(os.path.join(path, "manifest.json")):
        manifest = read_manifest(path)
        if manifest.get("kind") != "toy_vae" or manifest["architecture"] != arch:
            raise CheckpointError("VAE checkpoint does not match the configured architecture")
        vae = ToyVae(world.image_dim, w["vae_latent"], w["vae_width"])
        load_into(vae.store, path, manifest)
        vae.store.freeze()
        return vae
    vae = train_toy_vae(world.templates, latent_dim=w["vae_latent"], width=w["vae_width"],
                        n_steps=w["vae_steps"], kl_weight=w["vae_kl_weight"], seed=w["seed"])
    if path:
        save_store(vae.store, path, "toy_vae", arch)
    return vae


def toy_pairs(w: dict, world, vae, condition=None):
    condition = condition or w["condition"]
    if condition == "attributes":
        return tasks.attribute_pairs(world, vae)
    if condition == "content":
        return tasks.content_pairs(world, vae)
    if condition == "set":
        return tasks.set_pairs(world, vae)
    return tasks.deform_pairs(world, vae, w["deform_shift"])


def _train_or_load(cfg, pair_source, ckpt, out_dir, name="model"):
    """Load ``ckpt`` when it exists, otherwise train and save there (or in out_dir)."""
    if ckpt and os.path.exists(os.path.join(ckpt, "manifest.json")):
        return load_checkpoint(ckpt), None
    model, history = train(cfg["train"], pair_source)
    path = ckpt or os.path.join(out_dir, name)
    save_checkpoint(model, path, seeds={"train": cfg["train"].seed})
    _write_text(os.path.join(out_dir, f"{name}_loss.csv"), format_loss_csv(history))
    return model, history


def _hit_rate(mask):
    return float(np.mean(mask))


def _pos_close(a, b, tol=1):
    return np.all(np.abs(a[:, :2] - b[:, :2]) <= tol, axis=1)


# -- task runners ----------------------------------------------------------------

def run_train(cfg, out_dir, ckpt):
    w = cfg["world"]
    if w["kind"] == "gaussian":
        source = build_gaussian(w).pairs
    else:
        world = ToyImageWorld()
        vae = toy_vae(w, world, cfg["io"].get("vae_checkpoint"))
        source = toy_pairs(w, world, vae)
    model, history = train(cfg["train"], source)
    save_checkpoint(model, ckpt or os.path.join(out_dir, "model"),
                    seeds={"train": cfg["train"].seed})
    _write_text(os.path.join(out_dir, "loss.csv"), format_loss_csv(history))


def run_translate(cfg, out_dir, ckpt):
    w, args = cfg["world"], cfg["task_args"]
    world = build_gaussian(w)
    model, _ = _train_or_load(cfg, world.pairs, ckpt, out_dir)
    if "x" in args:
        x = np.asarray(args["x"], dtype=np.float64)
    else:
        x, _, _, _ = world.sample(Rng(args.get("probe_seed", 1)), 1)
    n = int(args.get("n", 4096))
    req = tasks.TranslationRequest(x=x, n=n, seed=cfg["train"].seed)
    y, e_b = tasks.translate(req, world.encode_a, model, world.decode_b, return_code=True)
    mean, cov = world.conditional(world.encode_a(x)[0] if np.ndim(x) == 2 else world.encode_a(x))
    stats = evalkit.GaussStats.from_samples(e_b)
    report = {
        "fd": evalkit.frechet_distance(stats, evalkit.GaussStats(mean, cov, n)),
        "mean_rmse": float(np.sqrt(np.mean((stats.mean - mean) ** 2))),
        "n": n,
    }
    rows = ["\t".join(f"{v:.17g}" for v in row) for row in y]
    _write_text(os.path.join(out_dir, "translations.tsv"), "\n".join(rows) + "\n")
    _write_json(os.path.join(out_dir, "report.json"), report)


def _toy_setup(cfg, condition, out_dir, ckpt):
    w = cfg["world"]
    world = ToyImageWorld()
    vae = toy_vae(w, world, cfg["io"].get("vae_checkpoint"))
    model, _ = _train_or_load(cfg, toy_pairs(w, world, vae, condition), ckpt, out_dir)
    return w, world, vae, model


def _finish_toy(cfg, out_dir, ckpt, world, images, report):
    tasks.write_task_output(out_dir, cfg["task"], world, images,
                            seeds={"world": cfg["world"]["seed"], "train": cfg["train"].seed},
                            checkpoint=ckpt)
    _write_json(os.path.join(out_dir, "report.json"), report)


def run_modify(cfg, out_dir, ckpt):
    w, world, vae, model = _toy_setup(cfg, "attributes", out_dir, ckpt)
    args = cfg["task_args"]
    y, attrs = world.sample(Rng(w["seed"] + 1), int(args.get("n_probe", 1000)))
    a = world.attribute_bits(attrs)
    a_star = a.copy()
    bit = int(args.get("bit", 0))
    a_star[:, bit] = 1.0 - a_star[:, bit]
    y_star, code = tasks.modify_attributes(y, a, a_star, vae.encode_mean, model, vae.decode_np,
                                           return_code=True)
    back = tasks.transfer_code(code, a_star, a, model)
    got = world.classify(y_star)
    report = {
        "hue_rate": _hit_rate(got[:, 3] == world.hue_from_bits(a_star)),
        "double_flip_max_err": float(np.max(np.abs(back - vae.encode_mean(y)))),
    }
    _finish_toy(cfg, out_dir, ckpt, world, y_star, report)


def run_exemplar(cfg, out_dir, ckpt):
    w, world, vae, model = _toy_setup(cfg, "content", out_dir, ckpt)
    rng = Rng(w["seed"] + 1)
    n = int(cfg["task_args"].get("n_probe", 1000))
    x, xa = world.sample(rng, n)
    y, ya = world.sample(rng, n)
    y_star = tasks.exemplar_swap(x, y, world.content_moments, vae.encode_mean, model, vae.decode_np)
    got = world.classify(y_star)
    report = {"content_rate": _hit_rate(_pos_close(got, xa)),
              "style_rate": _hit_rate(got[:, 3] == ya[:, 3])}
    _finish_toy(cfg, out_dir, ckpt, world, y_star, report)


def run_unpaired(cfg, out_dir, ckpt):
    w, world, vae, model = _toy_setup(cfg, "set", out_dir, ckpt)
    args = cfg["task_args"]
    hues = tuple(args.get("hues", (0, 2)))
    n = int(args.get("n_probe", 1000))
    y0, a0 = world.sample(Rng(w["seed"] + 1), n, hues=[hues[0]])
    y1, _ = world.sample(Rng(w["seed"] + 2), n, hues=[hues[1]])
    y_star, code = tasks.unpaired_translate(y0, 0, 1, vae.encode_mean, model, vae.decode_np,
                                            return_code=True)
    got = world.classify(y_star)
    c0, c1 = vae.encode_mean(y0), vae.encode_mean(y1)
    report = {
        "hue_rate": _hit_rate(got[:, 3] == hues[1]),
        "position_rate": _hit_rate(_pos_close(got, a0)),
        "fd": evalkit.fd_between(code, c1),
        "fd_reference": evalkit.fd_between(c0, c1),
    }
    _finish_toy(cfg, out_dir, ckpt, world, y_star, report)


def run_disentangle(cfg, out_dir, ckpt):
    w, world, vae, model = _toy_setup(cfg, "deform", out_dir, ckpt)
    rng = Rng(w["seed"] + 1)
    n = int(cfg["task_args"].get("n_probe", 1000))
    y, ya = world.sample(rng, n)
    x, xa = world.sample(rng, n)
    y_star = tasks.disentangle_swap(y, x, vae.encode_mean, model, vae.decode_np)
    got = world.classify(y_star)
    report = {"shape_rate": _hit_rate(_pos_close(got, ya)),
              "appearance_rate": _hit_rate(got[:, 3] == xa[:, 3])}
    _finish_toy(cfg, out_dir, ckpt, world, y_star, report)


def run_diagnose(cfg, out_dir, ckpt):
    w, args = cfg["world"], cfg["task_args"]
    world = ToyImageWorld()
    vae = toy_vae(w, world, cfg["io"].get("vae_checkpoint"))
    expert = train_attribute_classifier(world, seed=w["seed"])
    layers = list(args.get("layers", [0, 1, 2]))
    taus = {}
    for layer in layers:
        taus[layer], _ = _train_or_load(cfg, tasks.tap_pairs(world, vae, expert, layer),
                                        None, out_dir, name=f"model_tap{layer}")
    probes, _ = world.sample(Rng(w["seed"] + 1), int(args.get("n_probe", 64)))
    spectrum = tasks.invariance_spectrum(expert, layers, probes, taus, vae.decode_np,
                                         n=int(args.get("n", 32)), seed=w["seed"])
    _write_json(os.path.join(out_dir, "report.json"),
                {"layers": layers, "diversity": spectrum,
                 "increasing": bool(np.all(np.diff(spectrum) > 0))})


def run_ablation(cfg, out_dir, ckpt):
    w, args = cfg["world"], cfg["task_args"]
    report = evalkit.ablation_compare(build_gaussian(w), cfg["train"],
                                      n_probe=int(args.get("n_probe", 32)),
                                      n_samples=int(args.get("n_samples", 512)))
    _write_json(os.path.join(out_dir, "report.json"), report)


def run_gradcheck(cfg, out_dir, ckpt):
    args = cfg["task_args"]
    dim, batch = int(args.get("dim", 4)), int(args.get("batch", 8))
    t = cfg["train"]
    rng = Rng(t.seed)
    model = CinnModel(dim, dim, n_blocks=int(args.get("n_blocks", 3)),
                      hidden_width=t.hidden_width, embed_width=t.embed_width, dim_h=t.dim_h,
                      seed=t.seed)
    randomize(model, rng)
    e_a, e_b = rng.normal((batch, dim)), rng.normal((batch, dim))
    from .objective import nll_terms
    report = dc.grad_check(lambda: nll_terms(e_a, e_b, model)[0], model.store,
                           step=float(args.get("step", 1e-5)))
    result = {"max_rel_err": report["max_rel_err"], "per_param": report["per_param"],
              "passed": report["max_rel_err"] < 1e-4}
    _write_json(os.path.join(out_dir, "report.json"), result)
    if not result["passed"]:
        raise NonFiniteError(f"gradient check failed: max rel err {report['max_rel_err']:.3e}")


def run_eval(cfg, out_dir, ckpt):
    w, args = cfg["world"], cfg["task_args"]
    world = build_gaussian(w)
    model, _ = _train_or_load(cfg, world.pairs, ckpt, out_dir)
    e_a, e_b = world.pairs(Rng(w["seed"] + 1), int(args.get("n_probe", 4096)))
    optimum = evalkit.optimum_nll(world)
    loss = nll_loss(e_a, e_b, model)
    v = model.residual(e_b, e_a)
    max_corr, _ = evalkit.independence_report(v, e_a)
    bound, _ = mi_upper_bound(e_a, e_b, model, optimum)
    samples = model.sample(e_a, Rng(w["seed"] + 2).normal(e_b.shape))
    report = {
        "optimum_nll": optimum,
        "loss": loss.total,
        "max_abs_corr": max_corr,
        "mi_bound": bound,
        "mi_plugin": evalkit.gaussian_mi(v, e_a),
        "fd": evalkit.fd_between(samples, e_b),
    }
    _write_json(os.path.join(out_dir, "report.json"), report)


RUNNERS = {
    "train": run_train, "translate": run_translate, "modify": run_modify,
    "exemplar": run_exemplar, "unpaired": run_unpaired, "disentangle": run_disentangle,
    "diagnose": run_diagnose, "ablation": run_ablation, "gradcheck": run_gradcheck,
    "eval": run_eval,
}


def parse_args(argv):
    parser = argparse.ArgumentParser(prog="n2n", description=__doc__.splitlines()[0])
    parser.add_argument("task", choices=TASKS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--ckpt", default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser.parse_args(argv)


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        log.error("cannot read config: %s", err)
        return 3
    except json.JSONDecodeError as err:
        log.error("config is not valid JSON: %s", err)
        return 1
    try:
        cfg = validate_config(raw, args.task)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("`--seed` must be an unsigned 64-bit integer")
            cfg["train"].seed = args.seed
    except ConfigError as err:
        log.error("config error: %s", err)
        return 1
    out_dir = args.out or cfg["io"].get("out_dir") or "."
    ckpt = args.ckpt or cfg["io"].get("checkpoint")
    try:
        os.makedirs(out_dir, exist_ok=True)
        RUNNERS[cfg["task"]](cfg, out_dir, ckpt)
    except (NonFiniteError, ArithmeticError) as err:
        log.error("numerical failure: %s", err)
        return 2
    except ConfigError as err:
        log.error("config error: %s", err)
        return 1
    except OSError as err:
        log.error("I/O error: %s", err)
        return 3
    log.info("%s finished; outputs in %s", cfg["task"], out_dir)
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
