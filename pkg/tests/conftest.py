import json
import os

import numpy as np
import pytest

from savp.tensor import Tape, Tensor, backward


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + eps
        hi = f()
        arr[i] = orig - eps
        lo = f()
        arr[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def gradcheck(fn, *arrays, eps=1e-5):
    """Max relative error between tape and finite-difference gradients of ``fn(*tensors)``."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]

    def value():
        return float(fn(*leaves).data)

    with Tape():
        grads = backward(fn(*leaves))
    errs = []
    for leaf in leaves:
        num = numeric_grad(value, leaf.data, eps)
        errs.append(rel_err(grads.get(leaf, np.zeros_like(leaf.data)), num))
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_train_config(variant: str, **kw):
    from savp.train import ModelConfig, TrainConfig

    model = ModelConfig(
        n_z=2, hidden=(3, 4, 4), latent_hidden=3, n_kernels=2, kernel_size=3,
        encoder_widths=(3, 4, 4), disc_widths=(2, 3, 3, 4), power_iters=0,
    )
    base = dict(variant=variant, dtype="float64", horizon=3, context=1, iterations=100, batch_size=2, model=model)
    if variant in ("vae", "savp"):
        base.update(kl_start=0, kl_end=0, kl=0.5)
    base.update(kw)
    return TrainConfig(**base)


def objective_gradcheck(variant: str, n_params: int = 10, seed: int = 0) -> float:
    """Norm-relative FD error of the full one-step objective on sampled parameter entries.

    Generator and encoder entries are checked against the joint G/E loss,
    discriminator entries against the summed discriminator losses. Latent
    noise and teacher-forcing flags are pinned so each evaluation is the same
    function of the parameters.
    """
    from savp.objectives import Batch, assemble_objective
    from savp.train import build_models

    cfg = tiny_train_config(variant)
    models = build_models(cfg, np.random.default_rng(seed))
    data_rng = np.random.default_rng(seed + 1)
    frames = data_rng.uniform(0, 1, (2, 4, 1, 16, 16))
    batch = Batch(frames, context=1, teacher_forcing=np.array([True, False, False]))
    weights = cfg.weights()

    def objective():
        return assemble_objective(cfg.variant_spec(), batch, models, np.random.default_rng(seed + 2), 0, weights)

    with Tape():
        obj = objective()
        g_grads = backward(obj.generator_loss)
    d_grads = {}
    if obj.d_losses:
        with Tape():
            obj = objective()
            d_grads = backward(sum(obj.d_losses.values(), start=0.0))

    pick = np.random.default_rng(seed + 3)
    analytic, numeric = [], []
    for name, module in models.named().items():
        grads, key = (d_grads, "d") if name.startswith("D") else (g_grads, "g")

        def value():
            o = objective()
            if key == "g":
                return float(o.generator_loss.data)
            return float(sum(v.data for v in o.d_losses.values()))

        params = module.parameters()
        for _ in range(n_params):
            p = params[pick.integers(len(params))]
            idx = tuple(int(pick.integers(n)) for n in p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + 1e-5
            hi = value()
            p.data[idx] = orig - 1e-5
            lo = value()
            p.data[idx] = orig
            numeric.append((hi - lo) / 2e-5)
            analytic.append(grads.get(p, np.zeros_like(p.data))[idx])
    return rel_err(analytic, numeric)


def kl_monte_carlo(mu, sigma, n, rng):
    """E_q[log q(z) - log p(z)] estimated from samples, with its standard error."""
    z = mu + sigma * rng.standard_normal((n,) + mu.shape)
    log_q = -0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
    log_p = -0.5 * z**2 - 0.5 * np.log(2 * np.pi)
    per_sample = (log_q - log_p).reshape(n, mu.shape[0], -1).sum(axis=2).mean(axis=1)
    return per_sample.mean(), per_sample.std(ddof=1) / np.sqrt(n)


# -- command pipeline ---------------------------------------------------------------

SMALL_RUN = {
    "seed": 3,
    "scene": {"step": 3},
    "data": {"n_videos": 20, "length": 5, "fractions": [0.7, 0.1, 0.2]},
    "train": {
        "variant": "savp",
        "iterations": 4,
        "batch_size": 2,
        "horizon": 4,
        "context": 2,
        "checkpoint_every": 2,
        "kl_start": 0,
        "kl_end": 2,
        "model": {
            "n_z": 2, "hidden": [3, 4, 4], "latent_hidden": 3, "n_kernels": 2, "kernel_size": 3,
            "encoder_widths": [3, 4, 4], "disc_widths": [2, 3, 3, 4],
        },
    },
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run_pipeline(root, cfg_path):
    """gen-data, train, sample, eval into ``root``; returns the output paths."""
    from savp.cli import EXIT_OK, main

    data = str(root / "data.svpd")
    run = str(root / "run")
    samples = str(root / "samples")
    report = str(root / "report")
    assert main(["gen-data", "--config", cfg_path, "--out", data]) == EXIT_OK
    assert main(["train", "--config", cfg_path, "--data", data, "--out", run]) == EXIT_OK
    ckpt = os.path.join(run, "final.svpc")
    common = ["--fractions", "0.7", "0.1", "0.2"]
    assert main(["sample", "--ckpt", ckpt, "--data", data, "--n-samples", "3", "--out", samples] + common) == EXIT_OK
    assert main(["eval", "--samples", samples, "--data", data, "--out", report]) == EXIT_OK
    return dict(data=data, run=run, samples=samples, report=report)


def tree_bytes(directory):
    out = {}
    for base, _, files in os.walk(directory):
        for f in files:
            p = os.path.join(base, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, directory)] = fh.read()
    return out


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
