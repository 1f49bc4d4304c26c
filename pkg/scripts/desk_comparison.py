"""End-to-end reconstruction against FBP on the posterior mean, at desk scale.

Trains the posterior chain and one end-to-end model per preset pair, then
writes per-reading SSIM rows and a per-level summary to ``--out``.

    python scripts/desk_comparison.py --out runs/desk --pairs T16:T32 T8:T16
"""

import argparse
import os
import time

import torch

from tomoforge import engine as E
from tomoforge import networks as N
from tomoforge import training as T
from tomoforge.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--pairs", nargs="+", default=["T16:T32"], help="g1:g2 preset pairs")
    ap.add_argument("--posterior-steps", type=int, default=600, help="steps per posterior stage")
    ap.add_argument("--steps", type=int, default=None, help="end-to-end steps (config default if omitted)")
    ap.add_argument("--n-samples", type=int, default=16, help="held-out readings per signal level")
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    torch.set_num_threads(1)
    os.makedirs(args.out, exist_ok=True)

    cfg = load_config(args.config)
    g, noise, ladder = cfg.scan_geometry(), cfg.noise_params(), cfg.noise.ladder
    n = args.posterior_steps
    post_cfg = T.TrainConfig(cfg.train.batch_size, n, E.LrSchedule(3e-3, 50, max(1, n // 3)))

    t0 = time.perf_counter()
    torch.manual_seed(cfg.train.seed)
    mu, _ = T.train_posterior_mu(post_cfg, noise, g)
    sg, _ = T.train_posterior_sigma(mu, post_cfg, noise, g)
    post, _ = T.distill_posterior(mu, sg, post_cfg, noise, g)
    T.save_checkpoint(os.path.join(args.out, "posterior.tnsr"), {"posterior": post})
    print(f"posterior chain {time.perf_counter() - t0:.0f} s")

    methods = {"fbp": T.fbp_on_posterior(post, g)}
    for pair in args.pairs:
        g1, g2 = pair.split(":")
        torch.manual_seed(cfg.train.seed)
        model = N.build_end2end(g1, g2, cfg.train.bridge_channels, g, noise.b, noise.k)
        t0 = time.perf_counter()
        T.train_recon(model, cfg.train_config("recon", args.steps), noise, cfg.phantom_spec())
        print(f"{pair}: {sum(p.numel() for p in model.parameters())} parameters, "
              f"{time.perf_counter() - t0:.0f} s")
        T.save_checkpoint(os.path.join(args.out, f"e2e-{g1}-{g2}.tnsr"), {"model": model})
        methods[pair] = T.model_method(model)

    rows = T.evaluate(methods, g, noise, ladder, n_samples=args.n_samples)
    T.write_csv(os.path.join(args.out, "ssim.csv"), rows)
    summary = T.summarize(rows)
    print("method".ljust(12) + "".join(f"  s={s:.2f}" for s in ladder))
    for name in methods:
        print(name.ljust(12) + "".join(f"  {summary[(name, s)]:.4f}" for s in ladder))
    fbp = {s: summary[("fbp", s)] for s in ladder}
    for name in methods:
        if name != "fbp":
            margin = min(summary[(name, s)] - fbp[s] for s in ladder)
            print(f"{name}: worst margin over FBP-on-mu {margin:+.4f}")


if __name__ == "__main__":
    main()
