"""Late joiners: compare a run where half the roster activates at a given round with a full-roster run."""

from pathlib import Path

from _common import CONFIGS, parser, print_table, write_table
from pevcut.experiment import apply_overrides, load_config, run_experiment


def main():
    p = parser(__doc__, "plug_and_play")
    p.add_argument("--join-round", type=int, default=16)
    p.add_argument("--wakes", nargs="+", default=["sync", "jitter"])
    args = p.parse_args()
    out = Path(args.out)
    base = load_config(CONFIGS / "plug_and_play.toml")
    rows = []
    for wake in args.wakes:
        for join in (None, args.join_round):
            name = f"{wake}-{'all' if join is None else f'join{join}'}"
            cfg = apply_overrides(base, {"network.wake": wake, "network.join_round": join, "name": name})
            r = run_experiment(cfg, out / name, with_baselines=False, ground_truth=out / "ground_truth.json")
            rows.append({"wake": wake, "join_round": join if join is not None else "-",
                         "converged": r.trace.converged, "rounds": r.trace.rounds,
                         "max_J_minus_J_star": r.summary["final"]["J_max_minus_J_star"]})
    print_table(rows)
    write_table(out / "plug_and_play.csv", rows)


if __name__ == "__main__":
    main()
