"""Sample size for the factorial regression and a Monte Carlo check of its power.

    python scripts/power_analysis.py --f2 0.02 --power 0.95 --predictors 80 --cells 300
"""
import argparse

from twinflow.stats import monte_carlo_power, power_sample_size, regression_power, replications_per_cell


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--f2", type=float, default=0.02, help="Cohen's f^2 of the tested block")
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--power", type=float, default=0.95)
    ap.add_argument("--predictors", type=int, default=80)
    ap.add_argument("--tested", type=int, default=None, help="size of the tested block (default: all)")
    ap.add_argument("--cells", type=int, default=300)
    ap.add_argument("--sims", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    u = args.tested or args.predictors
    n = power_sample_size(args.f2, args.alpha, args.power, u, args.predictors)
    exact = regression_power(n, args.f2, args.alpha, u, args.predictors)
    print(f"total sample size      {n}")
    print(f"analytic power at N    {exact:.4f}")
    print(f"replications per cell  {replications_per_cell(n, args.cells)}  ({args.cells} cells)")
    if args.sims:
        sim = monte_carlo_power(n, args.f2, args.alpha, u, args.predictors, n_sims=args.sims, seed=args.seed)
        print(f"simulated power at N   {sim:.4f}  ({args.sims} regressions)")


if __name__ == "__main__":
    main()
