"""Projected-gradient refinement of GAN samples over many seeded readings.

Loads ``gan.tnsr`` from ``--run`` (see gan_diversity.py), refines one random
latent per reading and writes every objective trace to ``refine.csv``.
"""

import argparse
import csv
import os

import torch

from tomoforge import objectives as O
from tomoforge import training as T
from tomoforge.config import load_config
from tomoforge.sensor import make_rng


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--iters", type=int, default=None)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    g, noise, ladder = cfg.scan_geometry(), cfg.noise_params(), cfg.noise.ladder
    iters = args.iters or cfg.gan.refine_iters
    lr = args.lr or cfg.gan.refine_lr
    ck = T.load_checkpoint(os.path.join(args.run, "gan.tnsr"))
    gen, critic, post = (T.restore_model(ck, p) for p in ("generator", "critic", "posterior"))

    improved = 0
    with open(os.path.join(args.run, "refine.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "signal_s", "iteration", "objective"])
        for seed in range(args.seeds):
            rng = make_rng((11, seed))
            s = ladder[seed % len(ladder)]
            b = T.phantom_batch(rng, 1, g, noise, (s,))
            mu, sigma = T.posterior_of(post, b.r, b.s)
            z0 = O.sample_latent_sphere(gen.z_shape, rng, 1)
            res = T.refine_reconstruction(gen, critic, T._t(b.r), b.s, (mu, sigma), z0, lr=lr, iters=iters,
                                          lam=cfg.gan.lam)
            for it, v in enumerate(res.trace):
                w.writerow([seed, f"{s:.6f}", it, f"{v:.6f}"])
            improved += res.trace[-1] <= res.trace[0]
            print(f"seed {seed:2d} s={s:.2f}  {res.trace[0]:10.2f} -> {res.trace[-1]:10.2f}  "
                  f"max ||z|-1| {max(abs(n - 1) for n in res.norms):.1e}")
    print(f"objective not worse after {iters} iterations in {improved}/{args.seeds} runs")


if __name__ == "__main__":
    main()
