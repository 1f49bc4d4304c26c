"""Train the WGAN from a desk run and measure how sample spread tracks signal.

Reads ``posterior.tnsr`` and ``e2e-<g1>-<g2>.tnsr`` from ``--run`` (as written
by desk_comparison.py), warm-starts the generator from the end-to-end model,
trains it, and reports the mean pairwise l2 distance among samples per signal
level together with the median per-entry sample spread.
"""

import argparse
import csv
import os
import time

import numpy as np
import torch

from tomoforge import engine as E
from tomoforge import networks as N
from tomoforge import objectives as O
from tomoforge import training as T
from tomoforge.config import load_config
from tomoforge.sensor import SIGMA_FLOOR, make_rng


def diversity(gen, geometry, noise, ladder, readings=50, n=4, batch=10):
    out, spreads = {}, []
    for s in ladder:
        d = []
        for start in range(0, readings, batch):
            b = T.phantom_batch(make_rng((10, int(s * 1000), start)), batch, geometry, noise, (s,))
            zs = [torch.tensor(O.sample_latent_sphere(gen.z_shape, make_rng((10, int(s * 1000), start, k)), batch),
                               dtype=torch.float32) for k in range(n)]
            with torch.no_grad():
                xs = [gen(T._t(b.r), T._t(b.s), z) for z in zs]
                y1, y2 = (E.radon_forward_node(x, geometry) for x in xs[:2])
            d += [(xs[i] - xs[j]).reshape(batch, -1).norm(dim=1).numpy() for i in range(n) for j in range(i)]
            spreads.append(O.sample_spread(y1, y2).numpy().ravel())
        out[s] = float(np.mean(np.concatenate(d)))
    return out, float(np.median(np.concatenate(spreads)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True)
    ap.add_argument("--pair", default="T16:T32")
    ap.add_argument("--steps", type=int, default=None, help="GAN steps (config default if omitted)")
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    g, noise = cfg.scan_geometry(), cfg.noise_params()
    g1, g2 = args.pair.split(":")
    post = T.restore_model(T.load_checkpoint(os.path.join(args.run, "posterior.tnsr")), "posterior")
    e2e = T.restore_model(T.load_checkpoint(os.path.join(args.run, f"e2e-{g1}-{g2}.tnsr")), "model")

    torch.manual_seed(cfg.train.seed)
    gen = N.build_generator(g1, g2, g, cfg.gan.z_shape, cfg.train.bridge_channels, noise.b, noise.k)
    critic = N.build_discriminator(cfg.gan.critic_channels, cfg.gan.critic_depth)
    T.warm_start_generator(gen, e2e)
    t0 = time.perf_counter()
    hist = T.train_wgan(gen, critic, post, cfg.train_config("gan", args.steps), cfg.gan_config(), noise,
                        cfg.phantom_spec(), cfg.gan.critic_lr)
    print(f"GAN training {time.perf_counter() - t0:.0f} s, final critic loss {hist.critic[-1]:.4f}")
    T.save_checkpoint(os.path.join(args.run, "gan.tnsr"), {"generator": gen, "critic": critic, "posterior": post})

    gen.eval()
    dist, median_sp = diversity(gen, g, noise, cfg.noise.ladder)
    with open(os.path.join(args.run, "diversity.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["signal_s", "mean_pairwise_l2"])
        for s, v in dist.items():
            w.writerow([f"{s:.6f}", f"{v:.6f}"])
    for s, v in dist.items():
        print(f"s={s:.2f}  mean pairwise l2 {v:.4f}")
    vals = list(dist.values())
    print("strictly decreasing:", all(b < a for a, b in zip(vals, vals[1:])))
    print(f"median sigma_p {median_sp:.3e} (floor {SIGMA_FLOOR:.0e})")


if __name__ == "__main__":
    main()
