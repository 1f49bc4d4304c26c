"""Acceptance criteria C1-C12 at their stated tolerances.

Each test records one PASS/FAIL line (see ``conftest.py``) before asserting,
so the terminal summary lists every criterion even when some fail.  The
training-backed criteria (C6, C9, C10, C11) share session fixtures; a full
run takes roughly an hour on one CPU core.
"""

import math
import os
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest
import torch

from tomoforge import engine as E
from tomoforge import networks as N
from tomoforge import objectives as O
from tomoforge import training as T
from tomoforge.config import load_config
from tomoforge.data import shepp_logan
from tomoforge.radon import ScanGeometry, assemble_system_matrix, back_project, fbp_reconstruct, forward_project
from tomoforge.sensor import (
    SIGMA_FLOOR,
    GridTooNarrowWarning,
    NoiseParams,
    make_rng,
    photon_mean,
    posterior_oracle_grid,
    simulate_analog,
    simulate_readings,
)

pytestmark = pytest.mark.slow

DESK = ScanGeometry(64, 64, 64, 0.05)
NOISE = NoiseParams(math.log(1e3), 1.0, 1.0, 16)
LADDER = T.DEFAULT_LADDER


def _cfg(steps, lr, warmup, halve, batch=8):
    return T.TrainConfig(batch_size=batch, steps=steps, schedule=E.LrSchedule(lr, warmup, halve))


# --- C1, C2: projector ------------------------------------------------------------------


def test_c01_adjoint_exactness(acceptance):
    worst = {"float64": 0.0, "float32": 0.0}
    t0 = time.perf_counter()
    for n in (16, 32, 64):
        g = ScanGeometry(n)
        rng = make_rng((1, n))
        for _ in range(200):
            x = rng.uniform(size=g.image_shape)
            s = rng.uniform(size=g.sinogram_shape)
            for dt in worst:
                xa, sa = x.astype(dt), s.astype(dt)
                lhs = np.vdot(forward_project(xa, g).astype(np.float64), sa.astype(np.float64))
                rhs = np.vdot(xa.astype(np.float64), back_project(sa, g).astype(np.float64))
                worst[dt] = max(worst[dt], abs(lhs - rhs) / abs(lhs))
    elapsed = time.perf_counter() - t0
    ok = worst["float64"] < 1e-10 and worst["float32"] < 1e-4 and elapsed < 10
    acceptance("C1", ok, f"adjoint rel err double {worst['float64']:.2e}, single {worst['float32']:.2e}, "
                         f"{elapsed:.1f} s for 3x200 pairs")
    assert ok


def test_c02_dense_matrix_equivalence(acceptance):
    worst = 0.0
    for n, angles, dets in ((8, 8, 8), (16, 16, 16), (16, 11, 21), (32, 32, 32), (32, 45, 40)):
        g = ScanGeometry(n, angles, dets, pixel_spacing=0.5)
        a = assemble_system_matrix(g)
        rng = make_rng((2, n, angles))
        x = rng.standard_normal(g.image_shape)
        s = rng.standard_normal(g.sinogram_shape)
        fx, bs = forward_project(x, g).ravel(), back_project(s, g).ravel()
        worst = max(worst, np.linalg.norm(fx - a @ x.ravel()) / np.linalg.norm(fx),
                    np.linalg.norm(bs - a.T @ s.ravel()) / np.linalg.norm(bs))
    ok = worst < 1e-10
    acceptance("C2", ok, f"projectors vs dense system matrix, N <= 32: max rel err {worst:.2e}")
    assert ok


# --- C3: FBP ----------------------------------------------------------------------------


def test_c03_fbp_sanity(acceptance):
    x = shepp_logan(128)
    scores = {}
    for k in (16, 45, 90, 180):
        g = ScanGeometry(128, k)
        scores[k] = O.ssim(x, fbp_reconstruct(forward_project(x, g), g))
    vals = list(scores.values())
    monotone = all(b >= a - 0.01 for a, b in zip(vals, vals[1:]))
    ok = scores[180] >= 0.85 and monotone
    acceptance("C3", ok, "FBP Shepp-Logan 128 SSIM by angles " + ", ".join(f"{k}:{v:.4f}" for k, v in scores.items()))
    assert ok


# --- C4: autodiff -----------------------------------------------------------------------


def _op_checks():
    g = ScanGeometry(8, 6, 9, 0.5)
    gen = torch.Generator().manual_seed(4)

    def rnd(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64, requires_grad=True)

    slope = torch.rand(3, generator=gen, dtype=torch.float64).requires_grad_()
    return {
        "conv2d": (lambda x, w, b: E.conv2d(x, w, b, 1, 1), [rnd(1, 2, 5, 5), rnd(3, 2, 3, 3), rnd(3)]),
        "conv2d stride 2": (lambda x, w: E.conv2d(x, w, None, 2, 1), [rnd(1, 2, 6, 6), rnd(2, 2, 3, 3)]),
        "bilinear": (lambda x: E.bilinear_upsample(x, 2), [rnd(1, 2, 3, 4)]),
        "prelu": (lambda x, a: E.prelu(x, a), [rnd(1, 3, 4, 4), slope]),
        "exp": (E.exp_activation, [rnd(1, 2, 3, 3)]),
        "sigmoid": (E.sigmoid, [rnd(1, 2, 3, 3)]),
        "concat": (lambda a, b: E.concat([a, b]), [rnd(1, 2, 3, 3), rnd(1, 1, 3, 3)]),
        "split": (lambda x: E.split(x, [1, 2])[1] * 2 + E.split(x, [1, 2])[0], [rnd(1, 3, 3, 3)]),
        "global_avg_pool": (E.global_avg_pool, [rnd(2, 3, 4, 4)]),
        "linear": (lambda x, w, b: E.linear(x, w, b), [rnd(2, 5), rnd(3, 5), rnd(3)]),
        "radon_forward_node": (lambda x: E.radon_forward_node(x, g), [rnd(1, 1, 8, 8)]),
        "radon_backproject_node": (lambda s: E.radon_backproject_node(s, g), [rnd(1, 2, 6, 9)]),
        "spectral_normalize": (lambda w: E.spectral_normalize(w, E.warm_start_u(w.detach()), 5)[0],
                               [rnd(4, 6)]),
    }


def test_c04_autodiff(acceptance):
    errs = {name: E.gradcheck(fn, inputs) for name, (fn, inputs) in _op_checks().items()}
    torch.manual_seed(0)
    g = ScanGeometry(32, 32, 32, 0.05)
    m = N.build_end2end("T16", "T32", 4, g).double()
    with torch.no_grad():
        # move off the FBP initialization so every parameter reaches the output
        m.g2.readout.weight.add_(0.1 * torch.randn_like(m.g2.readout.weight))
    b = T.phantom_batch(make_rng(4), 1, g, NOISE, (NOISE.s,))
    r, s = T._t(b.r, torch.float64), torch.tensor(b.s)
    target = T._t(b.x, torch.float64)
    errs["end-to-end T16/T32 N=32 (parameters)"] = E.directional_gradcheck(
        lambda: ((m(r, s) - target) ** 2).mean(), list(m.parameters()), n_dirs=6)
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4
    acceptance("C4", ok, f"{len(errs)} gradchecks, worst {worst} at {errs[worst]:.2e}")
    assert ok, errs


# --- C5: noise statistics ---------------------------------------------------------------


def test_c05_noise_statistics(acceptance):
    settings = [  # (s, epsilon, k, b, y)
        (math.log(1e2), 0.0, 1.0, 16, 0.5),
        (math.log(1e3), 1.0, 1.0, 16, 1.0),
        (math.log(1e4), 4.0, 2.0, 12, 2.0),
        (math.log(30.0), 9.0, 0.5, 8, 0.2),
        (math.log(1e5), 0.25, 8.0, 16, 3.0),
    ]
    n = 100_000
    worst_z, in_range = 0.0, True
    for i, (s, eps, k, b, y) in enumerate(settings):
        p = NoiseParams(s, eps, k, b)
        z = simulate_analog(np.full(n, y), p, make_rng((5, i)))
        lam = float(photon_mean(y, p))
        var = lam + eps
        # fourth central moment of Poisson(lam) + N(0, eps)
        m4 = lam * (1 + 3 * lam) + 6 * lam * eps + 3 * eps**2
        se_mean = math.sqrt(var / n)
        se_var = math.sqrt((m4 - var**2) / n)
        worst_z = max(worst_z, abs(z.mean() - lam) / se_mean, abs(z.var(ddof=1) - var) / se_var)
        r = simulate_readings(np.linspace(-3.0, 8.0, n), p, make_rng((5, i, 1)))
        in_range &= bool(r.min() >= 0 and r.max() <= p.r_max)
    ok = worst_z < 5 and in_range
    acceptance("C5", ok, f"5 settings x 1e5 samples: worst moment deviation {worst_z:.2f} SE; readings in range: "
                         f"{in_range}")
    assert ok


# --- C6: posterior quality --------------------------------------------------------------

IID_STRIP = (8, 32)


@pytest.fixture(scope="session")
def iid_posterior():
    kw = dict(source="iid", shape=IID_STRIP)
    torch.manual_seed(0)
    mu, _ = T.train_posterior_mu(_cfg(5000, 3e-3, 20, 1666), NOISE, **kw)
    sg, _ = T.train_posterior_sigma(mu, _cfg(3000, 3e-3, 20, 1000), NOISE, **kw)
    jt, _ = T.distill_posterior(mu, sg, _cfg(3000, 3e-3, 20, 1000), NOISE, **kw)
    return jt


def _gauss_nll(y, mu, sigma):
    return float(np.mean(0.5 * math.log(2 * math.pi) + np.log(sigma) + (y - mu) ** 2 / (2 * sigma**2)))


def test_c06_posterior_quality(acceptance, iid_posterior):
    # oracle: exact per-entry posterior moments by integration over the data's
    # uniform prior on [0, 3]; the Gaussian with those moments minimizes the
    # expected Gaussian NLL, so the network should land just above it
    gaps = {}
    for s in LADDER:
        net, oracle = [], []
        for i in range(8):
            b = T.iid_batch(make_rng((6, i, int(s * 1000))), 8, (16, 64), NOISE, (s,))
            with torch.no_grad():
                mu, sigma = iid_posterior(T._t(b.r), torch.tensor(b.s, dtype=torch.float32))
            net.append(_gauss_nll(b.y, mu[:, 0].double().numpy(), sigma[:, 0].double().numpy()))
            for j in range(len(b.s)):
                with warnings.catch_warnings():
                    # the prior's edges are the grid's edges by construction
                    warnings.simplefilter("ignore", GridTooNarrowWarning)
                    o = posterior_oracle_grid(b.r[j], NOISE.with_signal(s), (0.0, 3.0, 1e-3))
                oracle.append(_gauss_nll(b.y[j], o.mu, o.sigma))
        gaps[s] = (float(np.mean(net)), float(np.mean(oracle)))
    ok = all(-0.01 <= n - o <= 0.1 for n, o in gaps.values())
    acceptance("C6", ok, "NLL nats/pixel net vs oracle by s: "
               + ", ".join(f"{s:.2f}: {n:.4f} vs {o:.4f} ({n - o:+.4f})" for s, (n, o) in gaps.items()))
    assert ok


# --- C7: loss identities ----------------------------------------------------------------


def _norm_loop(v, sigma):
    total = 0.0
    for a, b in zip(v.ravel(), sigma.ravel()):
        total += (a / b) ** 2
    return total


def _kl_loop(y1, y2, mu, sigma):
    total = 0.0
    for a, b, m, s in zip(y1.ravel(), y2.ravel(), mu.ravel(), sigma.ravel()):
        sp = max(math.sqrt((a - b) ** 2 / 2), SIGMA_FLOOR)
        total += (((a + b) / 2 - m) / s) ** 2 + 2 * math.log(s / sp) + (sp / s) ** 2
    return total


def test_c07_loss_identities(acceptance):
    rng = make_rng(7)
    errs = []
    for _ in range(20):
        y1, y2, mu = (rng.standard_normal((6, 9)) for _ in range(3))
        sigma = rng.uniform(0.1, 3.0, (6, 9))
        y2[0, :3] = y1[0, :3]  # floored entries
        errs.append(abs(O.weighted_sino_norm(y1 - mu, sigma) - _norm_loop(y1 - mu, sigma)))
        errs.append(abs(O.kl_diversity_loss(y1, y2, mu, sigma) - _kl_loop(y1, y2, mu, sigma)))
    sigma, sp = rng.uniform(1e-3, 10, 1000), rng.uniform(1e-3, 10, 1000)
    sp[:100] = sigma[:100]
    term = O.spread_term(sigma, sp)
    equal = np.isclose(sp, sigma, rtol=1e-12, atol=0)
    spread_ok = bool(np.all(term >= 1 - 1e-12) and np.all(np.abs(term[equal] - 1) <= 1e-12)
                     and np.all(term[~equal] > 1))
    y = rng.standard_normal((5, 5))
    nll0 = float(O.posterior_nll(y, y, np.ones_like(y)))
    ok = max(errs) < 1e-12 and spread_ok and nll0 == 0
    acceptance("C7", ok, f"max |loss - scalar loop| {max(errs):.1e}; spread term >= 1 with equality iff "
                         f"sigma_p = sigma: {spread_ok}; nll(y=mu, sigma=1) = {nll0}")
    assert ok


# --- C8: spectral normalization ---------------------------------------------------------


def test_c08_spectral_normalization(acceptance):
    rng = make_rng(8)
    sig = []
    for i in range(50):
        torch.manual_seed(i)
        if i % 2:
            layer = N.SNLinear(int(rng.integers(4, 129)), int(rng.integers(4, 129)))
        else:
            layer = N.SNConv(int(rng.integers(1, 65)), int(rng.integers(1, 65)), 3)
        layer.train()
        w = layer.normalized_weight().detach().reshape(layer.weight.shape[0], -1).double().numpy()
        sig.append(np.linalg.svd(w, compute_uv=False)[0])
    lo, hi = min(sig), max(sig)
    ok = 0.95 <= lo and hi <= 1.05
    acceptance("C8", ok, f"sigma_max of 50 normalized layers (5 power iterations) in [{lo:.4f}, {hi:.4f}]")
    assert ok


# --- C9: end-to-end vs FBP-on-mu --------------------------------------------------------


@pytest.fixture(scope="session")
def desk_models():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    post_cfg = _cfg(600, 3e-3, 50, 200)
    mu, _ = T.train_posterior_mu(post_cfg, NOISE, DESK)
    sg, _ = T.train_posterior_sigma(mu, post_cfg, NOISE, DESK)
    post, _ = T.distill_posterior(mu, sg, post_cfg, NOISE, DESK)
    torch.manual_seed(0)
    e2e = N.build_end2end("T16", "T32", 16, DESK, NOISE.b, NOISE.k)
    T.train_recon(e2e, T.TrainConfig(), NOISE)
    return post, e2e, time.perf_counter() - t0


def test_c09_end_to_end_beats_fbp(acceptance, desk_models):
    post, e2e, train_time = desk_models
    t0 = time.perf_counter()
    rows = T.evaluate({"fbp": T.fbp_on_posterior(post, DESK), "e2e": T.model_method(e2e)}, DESK, NOISE,
                      n_samples=16)
    elapsed = train_time + time.perf_counter() - t0
    summary = T.summarize(rows)
    margins = {s: summary[("e2e", s)] - summary[("fbp", s)] for s in LADDER}
    ok = all(m > 0 for m in margins.values()) and elapsed < 7200
    target = all(m >= 0.02 for m in margins.values())
    acceptance("C9", ok, "held-out SSIM e2e vs FBP-on-mu by s: "
               + ", ".join(f"{s:.2f}: {summary[('e2e', s)]:.3f} vs {summary[('fbp', s)]:.3f}" for s in LADDER)
               + f"; 0.02 margin target met: {target}; {elapsed / 60:.1f} min")
    assert ok


# --- C10, C11: GAN ----------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_gan(desk_models):
    post, e2e, _ = desk_models
    cfg = load_config()
    torch.manual_seed(0)
    gen = N.build_generator("T16", "T32", DESK, cfg.gan.z_shape, 16, NOISE.b, NOISE.k)
    critic = N.build_discriminator(cfg.gan.critic_channels, cfg.gan.critic_depth)
    T.warm_start_generator(gen, e2e)
    T.train_wgan(gen, critic, post, cfg.train_config("gan"), cfg.gan_config(), NOISE, cfg.phantom_spec(),
                 cfg.gan.critic_lr)
    gen.eval()
    critic.eval()
    return gen, critic, post


def test_c10_gan_diversity_follows_signal(acceptance, desk_gan):
    gen, _, _ = desk_gan
    dist, spreads = {}, []
    for s in LADDER:
        d = []
        for start in range(0, 50, 10):
            b = T.phantom_batch(make_rng((10, int(s * 1000), start)), 10, DESK, NOISE, (s,))
            zs = [torch.tensor(O.sample_latent_sphere(gen.z_shape, make_rng((10, int(s * 1000), start, k)), 10),
                               dtype=torch.float32) for k in range(4)]
            with torch.no_grad():
                xs = [gen(T._t(b.r), T._t(b.s), z) for z in zs]
                y1, y2 = (E.radon_forward_node(x, DESK) for x in xs[:2])
            for i in range(4):
                for j in range(i):
                    d.append((xs[i] - xs[j]).reshape(10, -1).norm(dim=1).numpy())
            spreads.append(O.sample_spread(y1, y2).numpy().ravel())
        dist[s] = float(np.mean(np.concatenate(d)))
    vals = [dist[s] for s in LADDER]
    decreasing = all(b < a for a, b in zip(vals, vals[1:]))
    median_sp = float(np.median(np.concatenate(spreads)))
    ok = decreasing and median_sp > 3 * SIGMA_FLOOR
    acceptance("C10", ok, "mean pairwise l2 of 4 samples over 50 readings by s: "
               + ", ".join(f"{s:.2f}: {v:.4f}" for s, v in dist.items())
               + f"; median sigma_p {median_sp:.2e} (3 x floor = {3 * SIGMA_FLOOR:.0e})")
    assert ok


def test_c11_refinement(acceptance, desk_gan):
    gen, critic, post = desk_gan
    cfg = load_config()
    not_worse, worst_norm = 0, 0.0
    for seed in range(20):
        rng = make_rng((11, seed))
        b = T.phantom_batch(rng, 1, DESK, NOISE, (LADDER[seed % len(LADDER)],))
        mu, sigma = T.posterior_of(post, b.r, b.s)
        z0 = O.sample_latent_sphere(gen.z_shape, rng, 1)
        res = T.refine_reconstruction(gen, critic, T._t(b.r), b.s, (mu, sigma), z0, lr=1e-4, iters=100,
                                      lam=cfg.gan.lam)
        not_worse += res.trace[100] <= res.trace[0]
        worst_norm = max(worst_norm, max(abs(n - 1) for n in res.norms))
    ok = worst_norm <= 1e-6 and not_worse >= 18
    acceptance("C11", ok, f"|z| - 1 at most {worst_norm:.1e} over every iteration; objective(100) <= "
                          f"objective(0) in {not_worse}/20 runs at lr 1e-4")
    assert ok


# --- C12: reproducibility ---------------------------------------------------------------

TINY = [
    "geometry.image_size=32", "geometry.n_angles=32", "geometry.n_detectors=32",
    "train.batch_size=2", "train.bridge_channels=4", "train.posterior_channels=8", "train.checkpoint_every=2",
    "gan.z_shape=4,2,2", "gan.critic_depth=3", "gan.critic_channels=4", "gan.n_critic=1",
]


def _cli(*args):
    argv = [sys.executable, "-m", "tomoforge.cli", *map(str, args), "--seed", "3", "--threads", "1"]
    for item in TINY:
        argv += ["--set", item]
    out = subprocess.run(argv, capture_output=True, text=True, env={**os.environ, "TOMOFORGE_THREADS": ""})
    assert out.returncode == 0, out.stderr
    return out.stdout


def _tree_bytes(root):
    files = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            p = os.path.join(dirpath, name)
            with open(p, "rb") as fh:
                files[os.path.relpath(p, root)] = fh.read()
    return files


def _run_all(d):
    _cli("simulate", "--out", d / "r.tnsr", "--count", 2, "--ladder", "--preview", d / "r.png")
    _cli("train", "--kind", "posterior", "--run-dir", d / "post", "--steps", 2)
    _cli("fbp", "--input", d / "r.tnsr", "--posterior", d / "post" / "step-6.tnsr", "--out", d / "f.png",
         "--out-tnsr", d / "f.tnsr")
    _cli("train", "--kind", "recon", "--run-dir", d / "recon", "--steps", 2)
    _cli("train", "--kind", "gan", "--run-dir", d / "gan", "--steps", 2, "--posterior", d / "post" / "step-6.tnsr",
         "--init", d / "recon" / "step-2.tnsr")
    _cli("sample", "--checkpoint", d / "gan" / "step-2.tnsr", "--input", d / "r.tnsr", "--n", 3, "--out", d / "s.png",
         "--out-tnsr", d / "s.tnsr")
    _cli("refine", "--checkpoint", d / "gan" / "step-2.tnsr", "--input", d / "r.tnsr", "--iters", 3,
         "--snapshots", 2, "--out", d / "refine")
    _cli("eval", "--checkpoint", d / "recon" / "step-2.tnsr", d / "gan" / "step-2.tnsr", "--n-samples", 2,
         "--out", d / "eval.csv")
    (d / "config.ini").write_text(_cli("config", "dump"))


def test_c12_reproducibility(acceptance, tmp_path):
    runs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        _run_all(d)
        runs.append(_tree_bytes(d))
    same_files = runs[0].keys() == runs[1].keys()
    differing = sorted(k for k in runs[0] if runs[1].get(k) != runs[0][k])
    # checkpoint round trip: restore every model and optimizer, save again,
    # and compare the file bytes
    ckpts = sorted(k for k in runs[0] if k.endswith(".tnsr") and "step-" in k)
    round_trip = True
    for rel in ckpts:
        ck = T.load_checkpoint(tmp_path / "a" / rel)
        models = {p: T.restore_model(ck, p) for p in T.model_prefixes(ck)}
        opt_prefixes = dict.fromkeys(k.split("/")[1] for k in ck if k.startswith("opt/"))
        opts = {p: T.restore_optimizer(ck, p, E.Adam(models[p].parameters())) for p in opt_prefixes}
        again = tmp_path / "again.tnsr"
        T.save_checkpoint(again, models, opts, step=int(ck["step"][0]))
        round_trip &= again.read_bytes() == runs[0][rel]
    ok = same_files and not differing and round_trip and len(runs[0]) > 10
    acceptance("C12", ok, f"{len(runs[0])} output files from every subcommand, run twice with --seed and "
                          f"--threads 1: {'bitwise identical' if not differing else 'differ: ' + ', '.join(differing)}"
                          f"; {len(ckpts)} checkpoints round-trip bitwise: {round_trip}")
    assert ok
