"""Paired dialect A vs B runs over several seeds, with a t-test per measure.

    python scripts/compare_dialects.py configs/grid2x2.json --seeds 9
"""
import argparse
import time

from twinflow.cli import build_flows, build_network, load_scenario
from twinflow.engine import EngineConfig, run
from twinflow.metrics import MEASURES, equivalence_report, report_to_csv
from twinflow.stats import one_sample_t


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, default=9)
    ap.add_argument("--csv", help="write the per-seed reports here")
    args = ap.parse_args()

    cfg = load_scenario(args.config)
    net = build_network(cfg.network, cfg.base_dir)
    reports = []
    t0 = time.perf_counter()
    for seed in range(args.seeds):
        flows = build_flows(cfg, net, seed)
        obs = {
            d: run(net, flows, EngineConfig(dialect=d, dt=cfg.dt, horizon=cfg.horizon, seed=seed))[0]
            for d in "AB"
        }
        rep = equivalence_report(obs["A"], obs["B"], scenario=cfg.name, seed=seed)
        reports.append(rep)
        print(f"seed {seed}: " + " ".join(f"{m}={v:.4g}" for m, v in rep.measures().items()))
    print(f"{len(reports)} paired runs in {time.perf_counter() - t0:.1f} s\n")

    print(f"{'measure':<20}{'mean':>12}{'std':>12}{'t':>10}{'p':>12}")
    for m in MEASURES:
        r = one_sample_t([rep.measures()[m] for rep in reports], 0.0)
        print(f"{m:<20}{r.mean:>12.4g}{r.std:>12.4g}{r.t:>10.2f}{r.p:>12.3g}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report_to_csv(reports))


if __name__ == "__main__":
    main()
