import argparse
import csv
from pathlib import Path

HERE = Path(__file__).parent
CONFIGS = HERE / "configs"


def parser(doc: str, default_out: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--out", default=f"results/{default_out}", help="output directory")
    return p


def write_table(path: Path, rows: list):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def print_table(rows: list):
    keys = list(rows[0])
    fmt = lambda v: f"{v:.6g}" if isinstance(v, float) else str(v)
    cells = [[fmt(r[k]) for k in keys] for r in rows]
    width = [max(len(k), *(len(c[j]) for c in cells)) for j, k in enumerate(keys)]
    print("  ".join(k.rjust(w) for k, w in zip(keys, width)))
    for c in cells:
        print("  ".join(v.rjust(w) for v, w in zip(c, width)))
