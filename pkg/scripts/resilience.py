"""ieee37: fault-free vs delayed/lossy messaging under each wake model, plus the baseline table."""

from pathlib import Path

from _common import CONFIGS, parser, print_table, write_table
from pevcut.experiment import apply_overrides, load_config, run_experiment


def main():
    p = parser(__doc__, "resilience")
    p.add_argument("--wakes", nargs="+", default=["sync", "jitter", "uniform"])
    p.add_argument("--q", type=float, default=0.1)
    args = p.parse_args()
    out = Path(args.out)
    base = load_config(CONFIGS / "ieee37.toml")
    truth = out / "ground_truth.json"
    out.mkdir(parents=True, exist_ok=True)
    rows, table = [], None
    for wake in args.wakes:
        for q in (0.0, args.q):
            cfg = apply_overrides(base, {"network.wake": wake, "network.q_delay": q, "network.q_drop": q,
                                         "name": f"ieee37-{wake}-q{q:g}"})
            last = wake == args.wakes[-1] and q > 0
            r = run_experiment(cfg, out / cfg.name, with_baselines=last, ground_truth=truth)
            f = r.summary["final"]
            rows.append({"wake": wake, "q": q, "converged": r.trace.converged, "rounds": r.trace.rounds,
                         "max_J_minus_J_star": f["J_max_minus_J_star"], "cost": f["cost"],
                         "max_violation": f["max_violation"]})
            if last:
                table = r.baselines
    print_table(rows)
    write_table(out / "resilience.csv", rows)
    if table:
        print()
        print_table(table)
        write_table(out / "baselines.csv", table)


if __name__ == "__main__":
    main()
