"""Fit one simulated dataset after testing it for a subgroup."""

import argparse

import numpy as np

from changeplane import DgpConfig, FitConfig, RngStream, bootstrap_pvalue, fit_alternating, gen_dataset
from changeplane.changeplane_fit import accuracy, l2_error


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--dist", default="pareto21")
    ap.add_argument("--beta-scale", type=float, default=1.0, dest="beta_scale")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    d, truth, labels = gen_dataset(DgpConfig(n=args.n, error_dist=args.dist,
                                             beta_scale=args.beta_scale, seed=args.seed))
    np.set_printoptions(precision=3, suppress=True)
    for method in ("rwast", "wast"):
        res = bootstrap_pvalue(d, method, 500, RngStream(args.seed))
        print(f"{method}: statistic {res.statistic:.4g}, p-value {res.p_value:.3f}")
    for policy in ("adaptive", "infinite"):
        fit = fit_alternating(d, FitConfig(tau_policy=policy))
        print(f"tau={policy:9} alpha={fit.params.alpha} beta={fit.params.beta} "
              f"eta={fit.params.eta}  L2={l2_error(fit.params, truth):.3f} "
              f"ACC={accuracy(fit.subgroup_labels, labels):.3f}")
    print(f"truth         alpha={truth.alpha} beta={truth.beta} eta={truth.eta}")


if __name__ == "__main__":
    main()
