"""Wall time of a dialect A run at several worker counts.

    python scripts/benchmark_workers.py configs/grid4x4.json --workers 1 2 4

Lane fan-out uses threads, so the speedup depends on free cores and on how
much of a step releases the GIL. Outputs are checked to be identical.
"""
import argparse
import time

from twinflow.cli import build_flows, build_network, load_scenario
from twinflow.engine import EngineConfig, run
from twinflow.metrics import dumps_observations


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--workers", type=int, nargs="+", default=[1, 4])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_scenario(args.config)
    net = build_network(cfg.network, cfg.base_dir)
    flows = build_flows(cfg, net, args.seed)
    print(f"{cfg.name}: {len(flows)} vehicles, {cfg.horizon:.0f} s")
    base = ref = None
    for w in args.workers:
        ec = EngineConfig(dialect="A", dt=cfg.dt, horizon=cfg.horizon, seed=args.seed, worker_count=w,
                          check_invariants=False)
        t0 = time.perf_counter()
        obs, summary = run(net, flows, ec)
        wall = time.perf_counter() - t0
        text = dumps_observations(obs)
        ref = ref or text
        base = base or wall
        print(f"workers {w}: {wall:6.2f} s  ratio {wall / base:.2f}  arrived {summary.arrived}"
              f"  identical {text == ref}")


if __name__ == "__main__":
    main()
