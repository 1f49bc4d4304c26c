"""Training loops, projected-gradient refinement, evaluation and checkpoints.

Every randomized quantity of step ``t`` is drawn from a Philox stream keyed
by ``(seed, stream, t)``, so runs are reproducible from the master seed and
resuming from a checkpoint continues exactly where the run stopped.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn

from . import engine as E
from . import networks, tnsr
from .data import PhantomSpec, make_phantom
from .objectives import (
    GanConfig,
    critic_loss,
    generator_loss,
    posterior_nll,
    project_to_sphere,
    refinement_objective,
    sample_latent_sphere,
    ssim,
)
from .radon import ScanGeometry, fbp_reconstruct, forward_project
from .sensor import NoiseParams, make_rng, simulate_readings

log = logging.getLogger(__name__)

DEFAULT_LADDER = (math.log(1e2), math.log(1e3), math.log(1e4))

# stream tags keep training, validation and latent draws independent
_TRAIN, _EVAL, _LATENT, _CRITIC = 0, 1, 2, 3


class DivergenceError(E.NonFiniteError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    schedule: E.LrSchedule = field(default_factory=lambda: E.LrSchedule(1e-3, 100, 700))
    ladder: tuple = DEFAULT_LADDER
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Batch(NamedTuple):
    x: np.ndarray  # (B, N, N) phantoms, or None for i.i.d. sinograms
    y: np.ndarray  # (B, A, D) noiseless sinograms
    r: np.ndarray  # (B, A, D) readings
    s: np.ndarray  # (B,) log intensities


def phantom_batch(rng, batch_size, geometry: ScanGeometry, noise: NoiseParams, ladder,
                  spec: PhantomSpec = PhantomSpec()) -> Batch:
    x = np.stack([make_phantom(spec, rng, geometry.image_size) for _ in range(batch_size)])
    y = forward_project(x, geometry)
    s = rng.choice(np.asarray(ladder, dtype=float), size=batch_size)
    r = np.stack([simulate_readings(y[i], noise.with_signal(s[i]), rng) for i in range(batch_size)])
    return Batch(x, y, r, s)


def iid_batch(rng, batch_size, shape, noise: NoiseParams, ladder, y_range=(0.0, 3.0)) -> Batch:
    """Sinograms whose entries are i.i.d. uniform on ``y_range``."""
    y = rng.uniform(*y_range, size=(batch_size, *shape))
    s = rng.choice(np.asarray(ladder, dtype=float), size=batch_size)
    r = np.stack([simulate_readings(y[i], noise.with_signal(s[i]), rng) for i in range(batch_size)])
    return Batch(None, y, r, s)


def _t(a, dtype=torch.float32):
    """(B, H, W) array -> (B, 1, H, W) tensor."""
    return torch.as_tensor(np.asarray(a), dtype=dtype).unsqueeze(1)


def _fit(params, loss_at: Callable[[int], torch.Tensor], cfg: TrainConfig, start: int = 0,
         opt: E.Adam | None = None, on_step=None) -> list[float]:
    opt = opt or E.Adam(params)
    losses = []
    for step in range(start, cfg.steps):
        opt.zero_grad()
        loss = loss_at(step)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", losses)
        loss.backward()
        opt.step(E.lr_at(step, cfg.schedule))
        losses.append(float(loss.detach()))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5g", step, losses[-1])
        if on_step is not None:
            on_step(step, losses[-1], opt)
    return losses


def _seed_torch(seed):
    torch.manual_seed(seed)


def _batch_source(source, geometry, noise, ladder, shape, spec):
    if source == "phantom":
        return lambda rng, b: phantom_batch(rng, b, geometry, noise, ladder, spec)
    if source == "iid":
        return lambda rng, b: iid_batch(rng, b, shape, noise, ladder)
    raise ValueError(f"unknown data source {source!r}")


def train_posterior_mu(cfg: TrainConfig, noise: NoiseParams, geometry: ScanGeometry | None = None,
                       source="phantom", shape=(16, 64), spec=PhantomSpec(), channels=32, n_res=2,
                       model=None, start=0, opt=None, on_step=None):
    """Fit the mean network by MSE; readings are re-simulated every step."""
    if model is None:
        _seed_torch(cfg.seed)
        model = networks.build_posterior_net("mu", noise.b, noise.k, channels, n_res)
    draw = _batch_source(source, geometry, noise, cfg.ladder, shape, spec)

    def loss_at(step):
        b = draw(make_rng((cfg.seed, _TRAIN, step)), cfg.batch_size)
        mu, _ = model(_t(b.r), torch.as_tensor(b.s, dtype=torch.float32))
        return ((mu - _t(b.y)) ** 2).mean()

    model.train()
    return model, _fit(model.parameters(), loss_at, cfg, start, opt, on_step)


def train_posterior_sigma(mu_model, cfg: TrainConfig, noise: NoiseParams, geometry: ScanGeometry | None = None,
                          source="phantom", shape=(16, 64), spec=PhantomSpec(), channels=32, n_res=2,
                          model=None, start=0, opt=None, on_step=None):
    """Fit the sigma network by Gaussian NLL with the mean network frozen."""
    if model is None:
        _seed_torch(cfg.seed + 1)
        model = networks.build_posterior_net("sigma", noise.b, noise.k, channels, n_res)
    draw = _batch_source(source, geometry, noise, cfg.ladder, shape, spec)
    mu_model.eval()

    def loss_at(step):
        b = draw(make_rng((cfg.seed, _TRAIN, step)), cfg.batch_size)
        r, s = _t(b.r), torch.as_tensor(b.s, dtype=torch.float32)
        with torch.no_grad():
            mu, _ = mu_model(r, s)
        _, sigma = model(r, s)
        return posterior_nll(_t(b.y), mu, sigma)

    model.train()
    return model, _fit(model.parameters(), loss_at, cfg, start, opt, on_step)


def distill_posterior(mu_model, sigma_model, cfg: TrainConfig, noise: NoiseParams,
                      geometry: ScanGeometry | None = None, source="phantom", shape=(16, 64),
                      spec=PhantomSpec(), channels=32, n_res=2, model=None, start=0, opt=None, on_step=None):
    """Train a two-headed network to reproduce both frozen teachers.

    The sigma head is matched in log space so that every scale of sigma
    counts, which a plain MSE on sigma would not do.
    """
    if model is None:
        _seed_torch(cfg.seed + 2)
        model = networks.build_posterior_net("joint", noise.b, noise.k, channels, n_res)
        model.load_state_dict(mu_model.state_dict(), strict=False)
    draw = _batch_source(source, geometry, noise, cfg.ladder, shape, spec)
    mu_model.eval()
    sigma_model.eval()

    def loss_at(step):
        b = draw(make_rng((cfg.seed, _TRAIN, step)), cfg.batch_size)
        r, s = _t(b.r), torch.as_tensor(b.s, dtype=torch.float32)
        with torch.no_grad():
            mu_t, _ = mu_model(r, s)
            _, sigma_t = sigma_model(r, s)
        mu, sigma = model(r, s)
        return ((mu - mu_t) ** 2).mean() + ((torch.log(sigma) - torch.log(sigma_t)) ** 2).mean()

    model.train()
    return model, _fit(model.parameters(), loss_at, cfg, start, opt, on_step)


def posterior_of(model, r, s) -> tuple[torch.Tensor, torch.Tensor]:
    """(mu, sigma) tensors from a joint posterior model, without gradients."""
    model.eval()
    with torch.no_grad():
        return model(torch.as_tensor(r, dtype=torch.float32).reshape(-1, 1, *np.shape(r)[-2:]),
                     torch.as_tensor(np.atleast_1d(s), dtype=torch.float32))


def train_recon(model, cfg: TrainConfig, noise: NoiseParams, spec=PhantomSpec(), start=0, opt=None,
                on_step=None):
    """Masked per-pixel MSE of the end-to-end model against the phantom."""
    g = model.geometry
    mask = model.mask

    def loss_at(step):
        b = phantom_batch(make_rng((cfg.seed, _TRAIN, step)), cfg.batch_size, g, noise, cfg.ladder, spec)
        out = model(_t(b.r), _t(b.s))
        err = (out - _t(b.x)) * mask
        return (err**2).sum() / (mask.sum() * cfg.batch_size)

    model.train()
    return _fit(model.parameters(), loss_at, cfg, start, opt, on_step)


def warm_start_generator(generator, end2end) -> list[str]:
    """Copy every end-to-end parameter whose name and shape match into ``generator``."""
    src = end2end.state_dict()
    dst = generator.state_dict()
    copied = [k for k, v in src.items() if k in dst and dst[k].shape == v.shape]
    generator.load_state_dict({k: src[k] for k in copied}, strict=False)
    return copied


@dataclass
class GanHistory:
    critic: list = field(default_factory=list)
    generator: list = field(default_factory=list)


def train_wgan(generator, critic, posterior_model, cfg: TrainConfig, gan_cfg: GanConfig, noise: NoiseParams,
               spec=PhantomSpec(), critic_lr: float | None = None, start=0, opts=None, on_step=None):
    """Alternate ``n_critic`` critic steps with one generator step.

    The generator step draws two latents per reading and minimizes
    :func:`generator_loss`; the critic minimizes ``mean D(real) - mean D(fake)``
    with spectral normalization applied on every forward pass.
    """
    g = generator.geometry
    z_shape = generator.z_shape
    b = cfg.batch_size
    opt_g, opt_d = opts or (E.Adam(generator.parameters()), E.Adam(critic.parameters(), beta1=0.5))
    hist = GanHistory()
    posterior_model.eval()
    generator.train()
    critic.train()
    for it in range(start, cfg.steps):
        lr = E.lr_at(it, cfg.schedule)
        for c in range(gan_cfg.n_critic):
            rng = make_rng((cfg.seed, _CRITIC, it, c))
            batch = phantom_batch(rng, b, g, noise, cfg.ladder, spec)
            z = torch.as_tensor(sample_latent_sphere(z_shape, rng, b), dtype=torch.float32)
            with torch.no_grad():
                fake = generator(_t(batch.r), _t(batch.s), z)
            opt_d.zero_grad()
            loss_d = critic_loss(critic, _t(batch.x), fake)
            if not torch.isfinite(loss_d):
                raise DivergenceError(f"non-finite critic loss at iteration {it}", hist.critic)
            loss_d.backward()
            opt_d.step(critic_lr if critic_lr is not None else lr)
            hist.critic.append(float(loss_d.detach()))

        rng = make_rng((cfg.seed, _TRAIN, it))
        batch = phantom_batch(rng, b, g, noise, cfg.ladder, spec)
        z = torch.as_tensor(sample_latent_sphere(z_shape, rng, 2 * b), dtype=torch.float32)
        r = _t(batch.r)
        mu, sigma = posterior_of(posterior_model, batch.r, batch.s)
        opt_g.zero_grad()
        s = _t(batch.s)
        out = generator(torch.cat([r, r]), torch.cat([s, s]), z)
        loss_g = generator_loss(out[:b], out[b:], (mu, sigma), critic, g, gan_cfg)
        if not torch.isfinite(loss_g):
            raise DivergenceError(f"non-finite generator loss at iteration {it}", hist.generator)
        loss_g.backward()
        opt_g.step(lr)
        hist.generator.append(float(loss_g.detach()))
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("gan it %d critic %.4g generator %.5g", it, hist.critic[-1], hist.generator[-1])
        if on_step is not None:
            on_step(it, hist, (opt_g, opt_d))
    return hist


class RefineResult(NamedTuple):
    z: torch.Tensor
    trace: list
    snapshots: dict
    norms: list


def refine_reconstruction(generator, critic, r, s, posterior, z0, lr: float = 1e-4, iters: int = 200,
                          lam: float = GanConfig().lam, snapshot_at=()) -> RefineResult:
    """Projected gradient descent on z over the unit sphere.

    Each iteration takes an Adam step of rate ``lr`` on
    ``||A G(r, z) - mu||^2_sigma + lam D(G(r, z))`` and renormalizes ``z``.
    The objective is a sum over every sinogram entry, so its raw gradient
    grows with the image size; Adam's per-coordinate scaling keeps ``lr`` a
    step length on the sphere.
    ``trace[i]`` is the objective before step ``i`` (``trace[iters]`` is the
    final value).  ``snapshots`` maps iteration -> image for the requested
    iterations.
    """
    generator.eval()
    critic.eval()
    for p in (*generator.parameters(), *critic.parameters()):
        p.requires_grad_(False)
    g = generator.geometry
    r = torch.as_tensor(r, dtype=torch.float32)
    s = torch.as_tensor(s, dtype=torch.float32).reshape(-1)
    z = project_to_sphere(torch.as_tensor(z0, dtype=torch.float32).clone())
    opt = E.Adam([z.requires_grad_(True)])
    wanted = set(snapshot_at)
    trace, norms, snaps = [], [], {}
    try:
        for it in range(iters + 1):
            obj = refinement_objective(generator, critic, r, s, posterior, z, g, lam)
            if not torch.isfinite(obj):
                raise DivergenceError(f"non-finite refinement objective at iteration {it}", trace)
            trace.append(float(obj.detach()))
            if it in wanted:
                with torch.no_grad():
                    snaps[it] = generator(r, s, z).numpy()
            if it == iters:
                break
            opt.zero_grad()
            obj.backward()
            opt.step(lr)
            with torch.no_grad():
                z.copy_(project_to_sphere(z))
            norms.append(float(z.detach().reshape(z.shape[0], -1).norm(dim=1).max()))
    finally:
        for p in (*generator.parameters(), *critic.parameters()):
            p.requires_grad_(True)
    return RefineResult(z.detach(), trace, snaps, norms)


# --- evaluation -----------------------------------------------------------------------

CSV_COLUMNS = ("sample_id", "signal_s", "method", "ssim")


def fbp_on_posterior(posterior_model, geometry: ScanGeometry, window="ramlak"):
    """Reconstruction method: FBP applied to the posterior mean sinogram."""

    def run(r, s):
        mu, _ = posterior_of(posterior_model, r, s)
        return fbp_reconstruct(mu[:, 0].double().numpy(), geometry, window)

    return run


def model_method(model):
    def run(r, s):
        model.eval()
        with torch.no_grad():
            return model(_t(r), _t(s)).double().numpy()[:, 0]

    return run


def generator_method(generator, rng):
    """Reconstruction method: one generator sample per reading, z drawn from ``rng``."""

    def run(r, s):
        generator.eval()
        z = torch.as_tensor(sample_latent_sphere(generator.z_shape, rng, len(r)), dtype=torch.float32)
        with torch.no_grad():
            return generator(_t(r), _t(s), z).double().numpy()[:, 0]

    return run


def evaluate(methods: dict, geometry: ScanGeometry, noise: NoiseParams, ladder=DEFAULT_LADDER,
             n_samples: int = 16, seed: int = 0, spec=PhantomSpec(), batch_size: int = 8) -> list[dict]:
    """SSIM of every method on held-out phantoms at every signal level.

    Held-out phantoms come from a stream disjoint from training.  All methods
    see the same readings.
    """
    rows = []
    for s in ladder:
        for start in range(0, n_samples, batch_size):
            ids = list(range(start, min(n_samples, start + batch_size)))
            rng = make_rng((seed, _EVAL, int(round(s * 1e6)), start))
            b = phantom_batch(rng, len(ids), geometry, noise, (s,), spec)
            for name, fn in methods.items():
                recon = fn(b.r, b.s)
                for j, i in enumerate(ids):
                    rows.append({"sample_id": i, "signal_s": float(s), "method": name,
                                 "ssim": ssim(b.x[j], recon[j])})
    return rows


def summarize(rows) -> dict:
    """Mean SSIM per (method, signal_s)."""
    acc = {}
    for row in rows:
        acc.setdefault((row["method"], row["signal_s"]), []).append(row["ssim"])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def write_csv(path, rows, columns=CSV_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for row in rows:
            w.writerow({c: row[c] for c in columns})


# --- checkpoints ----------------------------------------------------------------------


def checkpoint_path(run_dir, step: int) -> str:
    return os.path.join(os.fspath(run_dir), f"step-{step}.tnsr")


def save_checkpoint(path, models: dict, optimizers: dict | None = None, step: int = 0) -> None:
    """Write models (descriptor + state), optimizer moments and the step counter."""
    tensors = {"step": np.array([step], dtype=np.float64)}
    for prefix, model in models.items():
        tensors[f"{prefix}/__descriptor__"] = tnsr.encode_text(networks.descriptor_text(model))
        for name, value in model.state_dict().items():
            tensors[f"{prefix}/{name}"] = value
    for prefix, opt in (optimizers or {}).items():
        for name, value in opt.state_tensors().items():
            tensors[f"opt/{prefix}/{name}"] = value
    tnsr.save(path, tensors)


def load_checkpoint(path) -> dict:
    return tnsr.load(path)


def model_prefixes(ckpt: dict) -> list[str]:
    return [k.removesuffix("/__descriptor__") for k in ckpt if k.endswith("/__descriptor__")]


def restore_model(ckpt: dict, prefix: str) -> nn.Module:
    model = networks.build_from_descriptor(tnsr.decode_text(ckpt[f"{prefix}/__descriptor__"]))
    state = {k[len(prefix) + 1 :]: torch.from_numpy(v) for k, v in ckpt.items()
             if k.startswith(prefix + "/") and not k.endswith("__descriptor__")}
    model.load_state_dict(state)
    return model


def restore_optimizer(ckpt: dict, prefix: str, opt: E.Adam) -> E.Adam:
    key = f"opt/{prefix}/"
    tensors = {k[len(key):]: torch.from_numpy(v) for k, v in ckpt.items() if k.startswith(key)}
    if tensors:
        opt.load_state_tensors(tensors)
    return opt
