"""Round counts on the diameter-15, diameter-10 and alternating communication graphs."""

from pathlib import Path

from _common import CONFIGS, parser, print_table, write_table
from pevcut.experiment import apply_overrides, load_config, run_experiment


def main():
    p = parser(__doc__, "topologies")
    p.add_argument("--wake", default="sync")
    args = p.parse_args()
    out = Path(args.out)
    base = load_config(CONFIGS / "ieee37.toml")
    rows = []
    for topo in ("ieee37", "alt37", "alternating"):
        cfg = apply_overrides(base, {"scenario.topology": topo, "network.wake": args.wake, "name": topo})
        r = run_experiment(cfg, out / topo, with_baselines=False)
        rows.append({"topology": topo, "diameter": r.prepared.d, "tbar": r.prepared.schedule.tbar,
                     "K": r.prepared.K, "converged": r.trace.converged, "rounds": r.trace.rounds,
                     "J_star": r.central.J_star, "max_J_minus_J_star": r.summary["final"]["J_max_minus_J_star"]})
    print_table(rows)
    write_table(out / "topologies.csv", rows)


if __name__ == "__main__":
    main()
