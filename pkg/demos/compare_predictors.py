"""Score constant velocity against the learned model on held-out scenes.

The model is trained on one synthetic set and evaluated on another with
sliding 3 s / 5 s windows. OSP extrapolates vehicles at constant velocity;
OSP-AV is given their recorded futures instead.

    python3 demos/compare_predictors.py --train 200 --test 60
"""

import argparse

from pedyield.data_io import synthesize
from pedyield.metrics import cv_predictor, evaluate, osp_predictor
from pedyield.training import TrainingConfig, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--test", type=int, default=60)
    ap.add_argument("--samples", type=int, default=100)
    args = ap.parse_args()

    train, _ = synthesize(n=args.train, seed=11)
    test, _ = synthesize(n=args.test, seed=5)
    params, _ = fit(train, TrainingConfig(n_restarts=2))

    tables = {
        "cv": evaluate(test, cv_predictor(test.dt)),
        "osp": evaluate(test, osp_predictor(params), n_samples=args.samples, seed=1),
        "osp-av": evaluate(test, osp_predictor(params), n_samples=args.samples, seed=1,
                           mode="known"),
    }
    print(f"{tables['cv'].n} windows; ADE / RMSE in metres")
    print("  t s  " + "".join(f"{name:>16}" for name in tables))
    for i, sec in enumerate(tables["cv"].t_seconds):
        cells = "".join(f"{t.ade[i]:8.2f}/{t.rmse[i]:<7.2f}" for t in tables.values())
        print(f"{sec:5.0f}  {cells}")


if __name__ == "__main__":
    main()
