"""Distributed vs centralized on a family of small random contended instances."""

from pathlib import Path

import numpy as np

from _common import parser, print_table, write_table
from pevcut.experiment import config_from_dict, run_experiment
from pevcut.model import total_cost
from pevcut.solvers import solve_primal


def main():
    p = parser(__doc__, "optimality")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--faults", type=float, default=0.1, help="q_delay = q_drop on odd seeds")
    args = p.parse_args()
    rows = []
    for s in range(args.count):
        q = args.faults if s % 2 else 0.0
        cfg = config_from_dict({
            "name": f"random-{s}",
            "scenario": {"n": 2 + s % 5, "topology": ["line", "ring", "complete"][s % 3], "generator": "random",
                         "seed": s, "population": {"T": 2 + (s // 5) % 3}},
            "network": {"wake": "jitter", "seed": s, "q_delay": q, "q_drop": q},
            "algorithm": {"epsilon": args.epsilon},
        })
        r = run_experiment(cfg, with_baselines=False)
        inst = r.prepared.coord
        _, c, _ = solve_primal(inst)
        J = r.trace.final_J()
        rows.append({"seed": s, "n": inst.n, "T": inst.T, "faults": q, "converged": r.trace.converged,
                     "rounds": r.trace.rounds, "J_star": r.central.J_star,
                     "max_J_minus_J_star": float(J.max() - r.central.J_star),
                     "cost_rel_error": float((total_cost(inst, r.profiles) - c) / abs(c))})
    print_table(rows)
    write_table(Path(args.out) / "optimality.csv", rows)
    gaps = np.array([r["max_J_minus_J_star"] for r in rows])
    print(f"converged {sum(r['converged'] for r in rows)}/{len(rows)}; max J-J* {gaps.max():.2e}")


if __name__ == "__main__":
    main()
