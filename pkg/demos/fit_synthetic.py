"""Fit the yield model to synthetic crossings and compare with the generator.

Pedestrians walk toward a road while vehicles pass. The generator uses
known influence and risk functions, so we can check how much of them the
block coordinate descent recovers from noisy positions alone.

    python3 demos/fit_synthetic.py --n 300
"""

import argparse
import time

import numpy as np

from pedyield.data_io import reference_params, synthesize
from pedyield.interaction import risk_features_batch
from pedyield.training import TrainingConfig, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=300, help="number of synthetic pedestrians")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    truth = reference_params()
    tracks, latent = synthesize(params=truth, n=args.n, seed=args.seed)
    print(f"{len(tracks.pedestrians)} pedestrians, {np.mean(latent.q == 0):.1%} of steps yield")

    t0 = time.perf_counter()
    learned, report = fit(tracks, TrainingConfig(n_restarts=2))
    print(f"fit in {time.perf_counter() - t0:.1f} s: loss {report.final_loss:.1f}, "
          f"{report.n_iter} iterations, {report.n_records} interaction steps")
    print(f"sigma_v: learned {report.sigma_v:.4f}, generator {truth.sigma_v:.4f}")

    # The influence is the fraction of desired speed kept while yielding,
    # as a function of lateral distance from the vehicle's path.
    print("\nlateral m   f_u learned   f_u true")
    for lat, a, b in zip(learned.influence.nodes, learned.influence.weights,
                         truth.influence.weights):
        print(f"{lat:9.1f}   {a:11.3f}   {b:8.3f}")

    # Risk surface over log time-to-approach and log separation: where it
    # is positive, yielding is the more likely decision. Cells with fewer
    # than 20 interaction steps are left blank since the data says nothing about them.
    i, t = np.nonzero(latent.attended >= 0)
    v = latent.vehicles[i, latent.attended[i, t], t]
    tau, dmin, _ = risk_features_batch(latent.pos[i, t], latent.vel[i, t], v[:, :2], v[:, 2:])
    edges = np.linspace(0.0, 1.6, 9)
    ok = (tau > 0) & (dmin > 0)
    seen, _, _ = np.histogram2d(np.log10(tau[ok]), np.log10(dmin[ok]), bins=[edges, edges])
    seen = seen >= 20
    mid = (edges[:-1] + edges[1:]) / 2
    print("\nrisk sign, learned | true (rows: log10 tau, cols: log10 dmin; + means yield)")
    for k, lt in enumerate(mid):
        row = np.full_like(mid, lt)
        cells = [[("+" if x > 0 else ".") if n else " " for x, n in zip(fn(row, mid), seen[k])]
                 for fn in (learned.risk_fn, truth.risk_fn)]
        print(f"{lt:4.1f}  {' '.join(cells[0])}  |  {' '.join(cells[1])}")

if __name__ == "__main__":
    main()
