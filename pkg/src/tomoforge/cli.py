"""``tomoforge`` command-line entry point.

Exit codes: 0 ok, 2 configuration or usage error, 3 numeric divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings

import numpy as np
import torch

from . import engine as E
from . import imageio, networks, tnsr
from . import training as T
from .config import ConfigError, RunConfig, load_config
from .data import make_phantom, preprocess_ct_slice
from .objectives import sample_latent_sphere, ssim
from .radon import fbp_reconstruct, forward_project
from .sensor import GridTooNarrowWarning, make_rng, posterior_oracle_grid, simulate_readings

log = logging.getLogger("tomoforge")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

# stream tags for command-level randomness
_SIM, _SAMPLE, _REFINE, _EVAL_Z = 7, 11, 12, 13

# y grid for the oracle posterior fallback
ORACLE_GRID = (-1.0, 8.0, 2e-3)


class UsageError(Exception):
    pass


# --- shared plumbing --------------------------------------------------------------------


def _threads(args) -> int | None:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("TOMOFORGE_THREADS"):
        try:
            n = int(os.environ["TOMOFORGE_THREADS"])
        except ValueError:
            raise ConfigError("TOMOFORGE_THREADS", f"not an integer: {os.environ['TOMOFORGE_THREADS']!r}") from None
    else:
        return None
    if n < 1:
        raise ConfigError("threads", "must be >= 1")
    torch.set_num_threads(n)
    return n


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _geometry_vector(cfg: RunConfig) -> np.ndarray:
    g = cfg.scan_geometry()
    return np.array([g.image_size, g.n_angles, g.n_detectors, g.pixel_spacing], dtype=np.float64)


def _load_readings(path, cfg: RunConfig) -> dict:
    data = tnsr.load(path)
    if "geometry" in data and not np.array_equal(data["geometry"], _geometry_vector(cfg)):
        raise ConfigError("geometry", f"{path} was simulated with geometry {data['geometry'].tolist()}")
    return data


def _select(data: dict, key: str, index) -> np.ndarray:
    if key not in data:
        raise UsageError(f"input has no {key!r} tensor (has {sorted(data)})")
    a = np.asarray(data[key])
    if a.ndim == 2:
        a = a[None]
    if index is not None:
        if any(i < 0 or i >= len(a) for i in index):
            raise UsageError(f"index out of range for {len(a)} items")
        a = a[list(index)]
    return a


def _signals(data: dict, cfg: RunConfig, index, count: int) -> np.ndarray:
    if "signal" not in data:
        return np.full(count, cfg.noise.s)
    s = np.atleast_1d(data["signal"])
    return s[list(index)] if index is not None else s


def _load_ckpt(path) -> dict:
    return T.load_checkpoint(path)


def _posterior(cfg: RunConfig, r: np.ndarray, s: np.ndarray, ckpt_paths=()):
    """(mu, sigma) tensors ``(B, 1, A, D)`` from the first checkpoint holding a
    posterior network, else from per-pixel Bayes integration."""
    for path in ckpt_paths:
        if path is None:
            continue
        ckpt = _load_ckpt(path)
        if "posterior" in T.model_prefixes(ckpt):
            return T.posterior_of(T.restore_model(ckpt, "posterior"), r, s)
    log.info("no posterior network given; integrating the per-pixel posterior")
    mus, sigmas = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GridTooNarrowWarning)
        for ri, si in zip(r, s):
            post = posterior_oracle_grid(ri, cfg.noise_params(float(si)), ORACLE_GRID)
            mus.append(post.mu)
            sigmas.append(post.sigma)
    as_t = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32)[:, None]  # noqa: E731
    return as_t(mus), as_t(sigmas)


def _need(ckpt: dict, prefix: str, path) -> torch.nn.Module:
    if prefix not in T.model_prefixes(ckpt):
        raise UsageError(f"{path} holds no {prefix!r} model (has {T.model_prefixes(ckpt)})")
    return T.restore_model(ckpt, prefix)


def _check_geometry(model, cfg: RunConfig, path):
    if model.geometry != cfg.scan_geometry():
        raise ConfigError("geometry", f"{path} was trained for {model.geometry}")


# --- commands ---------------------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig) -> int:
    g = cfg.scan_geometry()
    rng = make_rng((cfg.train.seed, _SIM))
    if args.ct:
        phantoms, rejected = [], 0
        for path in args.ct:
            img = preprocess_ct_slice(imageio.read_png16(path), g.image_size, cfg.data.hu_threshold,
                                      tuple(cfg.data.hu_window))
            if img is None:
                rejected += 1
            else:
                phantoms.append(img)
        print(f"ct slices: {len(phantoms)} accepted, {rejected} rejected")
        if not phantoms:
            raise UsageError("no CT slice survived preprocessing")
        x = np.stack(phantoms)
    else:
        spec = cfg.phantom_spec()
        if args.phantom:
            spec = type(spec)(args.phantom, spec.n_ellipses, spec.intensity, spec.seed)
        x = np.stack([make_phantom(spec, rng, g.image_size) for _ in range(args.count)])
    y = forward_project(x, g)
    if args.signal is not None:
        s = np.full(len(x), args.signal)
    elif args.ladder:
        s = rng.choice(np.asarray(cfg.noise.ladder), size=len(x))
    else:
        s = np.full(len(x), cfg.noise.s)
    r = np.stack([simulate_readings(y[i], cfg.noise_params(float(s[i])), rng) for i in range(len(x))])
    tensors = {"phantom": x, "sinogram": y, "readings": r.astype(np.float64), "signal": s,
               "geometry": _geometry_vector(cfg),
               "noise": np.array([cfg.noise.epsilon, cfg.noise.k, cfg.noise.b], dtype=np.float64)}
    tnsr.save(args.out, tensors)
    if args.preview:
        imageio.write_png16(args.preview, imageio.tile(list(x), len(x)))
    print(f"wrote {len(x)} readings to {args.out}; max reading {int(r.max())} (limit {cfg.noise_params().r_max})")
    return EXIT_OK


def cmd_fbp(args, cfg: RunConfig) -> int:
    g = cfg.scan_geometry()
    data = _load_readings(args.input, cfg)
    if args.input_kind == "sinogram":
        sino = _select(data, "sinogram", args.index)
    else:
        r = _select(data, "readings", args.index)
        s = _signals(data, cfg, args.index, len(r))
        mu, _ = _posterior(cfg, r, s, [args.posterior])
        sino = mu[:, 0].double().numpy()
    recon = fbp_reconstruct(sino, g, args.window)
    imageio.write_png16(args.out, imageio.tile(list(recon), len(recon)))
    if args.out_tnsr:
        tnsr.save(args.out_tnsr, {"reconstruction": recon})
    if "phantom" in data:
        truth = _select(data, "phantom", args.index)
        scores = [ssim(t, x) for t, x in zip(truth, recon)]
        print("ssim " + " ".join(f"{v:.4f}" for v in scores))
    print(f"wrote {args.out}")
    return EXIT_OK


class _LossLog:
    """Loss CSV with one row per step; on resume rows from ``start`` on are dropped."""

    def __init__(self, path, columns, start):
        self.path, self.columns = path, columns
        kept = []
        if start and os.path.exists(path):
            with open(path, newline="") as fh:
                kept = [row for row in csv.DictReader(fh) if int(row["step"]) < start]
        self.fh = open(path, "w", newline="")
        self.w = csv.DictWriter(self.fh, fieldnames=columns)
        self.w.writeheader()
        self.w.writerows(kept)

    def row(self, **values):
        self.w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in values.items()})

    def close(self):
        self.fh.close()


def _train_posterior(args, cfg, run_dir, start, ckpt):
    """Mean net, then sigma net, then the distilled joint net, one step counter across all three."""
    tc = cfg.train_config("posterior", args.steps)
    per_stage = tc.steps
    noise, g, spec, ch = cfg.noise_params(), cfg.scan_geometry(), cfg.phantom_spec(), cfg.train.posterior_channels
    stages = (("mu", "mu", T.train_posterior_mu), ("sigma", "sigma", T.train_posterior_sigma),
              ("posterior", "joint", T.distill_posterior))
    total = per_stage * len(stages)
    models = {p: T.restore_model(ckpt, p) for p in T.model_prefixes(ckpt)} if ckpt else {}
    losses = _LossLog(os.path.join(run_dir, "loss.csv"), ["step", "stage", "loss"], start)
    try:
        for k, (name, head, fn) in enumerate(stages):
            first = k * per_stage
            if start >= first + per_stage:
                continue
            local = max(0, start - first)
            if local:
                model = models[name]
                opt = T.restore_optimizer(ckpt, name, E.Adam(model.parameters()))
            else:
                # same seeding as the library trainers use when they build the model themselves
                torch.manual_seed(tc.seed + k)
                model = networks.build_posterior_net(head, noise.b, noise.k, ch)
                if head == "joint":
                    model.load_state_dict(models["mu"].state_dict(), strict=False)
                opt = E.Adam(model.parameters())
            models[name] = model

            def on_step(step, loss, opt, name=name, first=first):
                done = first + step + 1
                losses.row(step=done - 1, stage=name, loss=loss)
                if done % cfg.train.checkpoint_every == 0 or done == total:
                    T.save_checkpoint(T.checkpoint_path(run_dir, done), dict(models), {name: opt}, done)

            teachers = [models[m] for m in ("mu", "sigma")[:k]]
            fn(*teachers, tc, noise, g, spec=spec, channels=ch, model=model, start=local, opt=opt, on_step=on_step)
    finally:
        losses.close()
    return total


def _train_recon(args, cfg, run_dir, start, ckpt):
    tc = cfg.train_config("recon", args.steps)
    g, noise = cfg.scan_geometry(), cfg.noise_params()
    if ckpt:
        model = _need(ckpt, "model", args.resume)
        opt = T.restore_optimizer(ckpt, "model", E.Adam(model.parameters()))
    else:
        torch.manual_seed(tc.seed)
        model = networks.build_end2end(cfg.train.g1, cfg.train.g2, cfg.train.bridge_channels, g,
                                       noise.b, noise.k)
        opt = E.Adam(model.parameters())
    losses = _LossLog(os.path.join(run_dir, "loss.csv"), ["step", "loss"], start)

    def on_step(step, loss, opt):
        losses.row(step=step, loss=loss)
        done = step + 1
        if done % cfg.train.checkpoint_every == 0 or done == tc.steps:
            T.save_checkpoint(T.checkpoint_path(run_dir, done), {"model": model}, {"model": opt}, done)

    try:
        T.train_recon(model, tc, noise, cfg.phantom_spec(), start, opt, on_step)
    finally:
        losses.close()
    return tc.steps


def _train_gan(args, cfg, run_dir, start, ckpt):
    tc = cfg.train_config("gan", args.steps)
    g, noise = cfg.scan_geometry(), cfg.noise_params()
    if tc.batch_size < 2:
        raise ConfigError("train.batch_size", "GAN training needs batch_size >= 2")
    if ckpt:
        G, D = _need(ckpt, "generator", args.resume), _need(ckpt, "critic", args.resume)
        post = _need(ckpt, "posterior", args.resume)
        opts = (T.restore_optimizer(ckpt, "generator", E.Adam(G.parameters())),
                T.restore_optimizer(ckpt, "critic", E.Adam(D.parameters(), beta1=0.5)))
    else:
        if args.posterior is None:
            raise UsageError("--posterior CHECKPOINT is required for GAN training")
        post = _need(_load_ckpt(args.posterior), "posterior", args.posterior)
        torch.manual_seed(tc.seed)
        G = networks.build_generator(cfg.train.g1, cfg.train.g2, g, cfg.gan.z_shape,
                                     cfg.train.bridge_channels, noise.b, noise.k)
        D = networks.build_discriminator(cfg.gan.critic_channels, cfg.gan.critic_depth)
        if args.init:
            T.warm_start_generator(G, _need(_load_ckpt(args.init), "model", args.init))
        opts = (E.Adam(G.parameters()), E.Adam(D.parameters(), beta1=0.5))
    losses = _LossLog(os.path.join(run_dir, "loss.csv"), ["step", "critic_loss", "generator_loss"], start)

    def on_step(it, hist, opts):
        losses.row(step=it, critic_loss=hist.critic[-1], generator_loss=hist.generator[-1])
        done = it + 1
        if done % cfg.train.checkpoint_every == 0 or done == tc.steps:
            T.save_checkpoint(T.checkpoint_path(run_dir, done), {"generator": G, "critic": D, "posterior": post},
                              {"generator": opts[0], "critic": opts[1]}, done)

    try:
        T.train_wgan(G, D, post, tc, cfg.gan_config(), noise, cfg.phantom_spec(), cfg.gan.critic_lr, start,
                     opts, on_step)
    finally:
        losses.close()
    return tc.steps


def cmd_train(args, cfg: RunConfig) -> int:
    run_dir = args.run_dir or cfg.paths.run_dir
    os.makedirs(run_dir, exist_ok=True)
    ckpt, start = None, 0
    if args.resume:
        ckpt = _load_ckpt(args.resume)
        start = int(ckpt["step"][0])
    fn = {"posterior": _train_posterior, "recon": _train_recon, "gan": _train_gan}[args.kind]
    total = fn(args, cfg, run_dir, start, ckpt)
    with open(os.path.join(run_dir, "config.ini"), "w") as fh:
        fh.write(cfg.dump())
    print(f"trained {args.kind} to step {total}; checkpoints in {run_dir}")
    return EXIT_OK


def _generator_bundle(path, cfg):
    ckpt = _load_ckpt(path)
    G, D = _need(ckpt, "generator", path), _need(ckpt, "critic", path)
    _check_geometry(G, cfg, path)
    return G, D


def cmd_sample(args, cfg: RunConfig) -> int:
    g = cfg.scan_geometry()
    G, _ = _generator_bundle(args.checkpoint, cfg)
    data = _load_readings(args.input, cfg)
    r = _select(data, "readings", args.index)
    s = _signals(data, cfg, args.index, len(r))
    mu, _ = _posterior(cfg, r, s, [args.posterior, args.checkpoint])
    fbp = fbp_reconstruct(mu[:, 0].double().numpy(), g)
    rng = make_rng((cfg.train.seed, _SAMPLE))
    G.eval()
    tiles, cols = [], args.n + 1 + bool(args.truth)
    truth = _select(data, "phantom", args.index) if args.truth else None
    samples = []
    with torch.no_grad():
        for i in range(len(r)):
            z = torch.as_tensor(sample_latent_sphere(G.z_shape, rng, args.n), dtype=torch.float32)
            ri = torch.as_tensor(r[i], dtype=torch.float32).expand(args.n, 1, *r.shape[-2:])
            si = torch.full((args.n,), float(s[i]))
            out = G(ri, si, z)[:, 0].double().numpy()
            samples.append(out)
            tiles += ([truth[i]] if truth is not None else []) + [fbp[i]] + list(out)
    imageio.write_png16(args.out, imageio.tile(tiles, cols))
    if args.out_tnsr:
        tnsr.save(args.out_tnsr, {"samples": np.stack(samples), "fbp": fbp})
    print(f"wrote {len(r)}x{cols} grid to {args.out}")
    return EXIT_OK


def cmd_refine(args, cfg: RunConfig) -> int:
    G, D = _generator_bundle(args.checkpoint, cfg)
    iters = cfg.gan.refine_iters if args.iters is None else args.iters
    lr = cfg.gan.refine_lr if args.lr is None else args.lr
    if not 1 <= args.snapshots <= iters + 1:
        raise ConfigError("snapshots", f"must be between 1 and iters + 1 = {iters + 1}")
    data = _load_readings(args.input, cfg)
    r = _select(data, "readings", [args.index])
    s = _signals(data, cfg, [args.index], 1)
    posterior = _posterior(cfg, r, s, [args.posterior, args.checkpoint])
    rng = make_rng((cfg.train.seed, _REFINE))
    z0 = sample_latent_sphere(G.z_shape, rng, 1)
    at = np.unique(np.round(np.linspace(0, iters, args.snapshots)).astype(int)).tolist()
    res = T.refine_reconstruction(G, D, torch.as_tensor(r, dtype=torch.float32)[:, None], s, posterior, z0,
                                  lr, iters, cfg.gan.lam, snapshot_at=at)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "objective.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"])
        for i, v in enumerate(res.trace):
            w.writerow([i, repr(v)])
    for it in at:
        imageio.write_png16(os.path.join(args.out, f"snapshot-{it:05d}.png"), res.snapshots[it][0, 0])
    print(f"final objective {res.trace[-1]!r} after {iters} iterations; {len(at)} snapshots in {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    g, noise = cfg.scan_geometry(), cfg.noise_params()
    methods = {}
    post_model = None
    for path in [args.posterior, *args.checkpoint]:
        if path is not None and post_model is None:
            ckpt = _load_ckpt(path)
            if "posterior" in T.model_prefixes(ckpt):
                post_model = T.restore_model(ckpt, "posterior")
    if post_model is not None:
        methods["fbp"] = T.fbp_on_posterior(post_model, g)
    else:
        methods["fbp"] = lambda r, s: fbp_reconstruct(_posterior(cfg, r, s)[0][:, 0].double().numpy(), g)
    for path in args.checkpoint:
        ckpt = _load_ckpt(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        for prefix in T.model_prefixes(ckpt):
            if prefix not in ("model", "generator"):
                continue
            model = T.restore_model(ckpt, prefix)
            _check_geometry(model, cfg, path)
            name = f"{stem}:{prefix}"
            if prefix == "model":
                methods[name] = T.model_method(model)
            else:
                methods[name] = T.generator_method(model, make_rng((cfg.train.seed, _EVAL_Z)))
    rows = T.evaluate(methods, g, noise, tuple(cfg.noise.ladder), args.n_samples, cfg.train.seed,
                      cfg.phantom_spec(), cfg.train.batch_size)
    T.write_csv(args.out, rows)
    summary = T.summarize(rows)
    ladder = list(cfg.noise.ladder)
    base, _ = os.path.splitext(args.out)
    with open(base + "-summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *[f"ssim_s={s:.4f}" for s in ladder]])
        for name in methods:
            w.writerow([name, *[f"{summary[(name, float(s))]:.6f}" for s in ladder]])
    for name in methods:
        print(f"{name:>24s} " + " ".join(f"{summary[(name, float(s))]:.4f}" for s in ladder))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_config(args, cfg: RunConfig) -> int:
    sys.stdout.write(cfg.dump())
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="master seed (overrides train.seed)")
    common.add_argument("--threads", type=int, help="torch thread cap (env TOMOFORGE_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tomoforge", description="Low-dose tomography denoising toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", parents=[common], help="simulate sensor readings of phantoms")
    sp.add_argument("--out", required=True, help="output TNSR file")
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--phantom", choices=("shepp_logan", "random_ellipses"))
    sp.add_argument("--ct", nargs="+", metavar="PNG", help="16-bit CT slices to preprocess instead of phantoms")
    sp.add_argument("--signal", type=float, help="log intensity s (default noise.s)")
    sp.add_argument("--ladder", action="store_true", help="draw s from noise.ladder per item")
    sp.add_argument("--preview", help="16-bit PNG strip of the phantoms")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("fbp", parents=[common], help="filtered back-projection")
    sp.add_argument("--input", required=True)
    sp.add_argument("--input-kind", choices=("readings", "sinogram"), default="readings")
    sp.add_argument("--posterior", help="checkpoint with a posterior network (default: exact integration)")
    sp.add_argument("--index", type=int, nargs="+")
    sp.add_argument("--window", choices=("ramlak", "hann"), default="ramlak")
    sp.add_argument("--out", required=True, help="16-bit PNG")
    sp.add_argument("--out-tnsr")
    sp.set_defaults(fn=cmd_fbp)

    sp = sub.add_parser("train", parents=[common], help="train a model")
    sp.add_argument("--kind", choices=("posterior", "recon", "gan"), required=True)
    sp.add_argument("--run-dir")
    sp.add_argument("--steps", type=int, help="override the step count for this kind")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--posterior", help="posterior checkpoint (gan)")
    sp.add_argument("--init", help="end-to-end checkpoint to warm-start the generator (gan)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", parents=[common], help="grid of GAN samples next to FBP")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--posterior")
    sp.add_argument("--index", type=int, nargs="+")
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--truth", action="store_true", help="prepend the ground-truth column")
    sp.add_argument("--out", required=True)
    sp.add_argument("--out-tnsr")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("refine", parents=[common], help="projected-gradient refinement of z")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--posterior")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--snapshots", type=int, default=4)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=cmd_refine)

    sp = sub.add_parser("eval", parents=[common], help="SSIM report over the signal ladder")
    sp.add_argument("--checkpoint", nargs="*", default=[])
    sp.add_argument("--posterior")
    sp.add_argument("--n-samples", type=int, default=16)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("config", parents=[common], help="configuration utilities")
    sp.add_argument("action", choices=("dump",))
    sp.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _threads(args)
        cfg = _config(args)
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except E.NonFiniteError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, tnsr.TnsrFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
