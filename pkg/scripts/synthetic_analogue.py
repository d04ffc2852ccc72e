"""Train the desk U-net on synthetic Voronoi/facet tiles and report held-out IoU."""
import argparse
from pathlib import Path

from fractoseg.experiments import synthetic_analogue


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--tiles", type=int, default=200)
    p.add_argument("--test", type=int, default=40)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", default="runs/synthetic", help="training log, weights and report.json")
    args = p.parse_args()

    out = Path(args.out)
    res = synthetic_analogue(args.tiles, args.test, args.epochs, args.seed, args.lr, out)
    for entry in res.history:
        print(entry.to_json())
    print(res.report.to_text())
    (out / "report.json").write_text(res.report.to_json())
    print(f"{res.seconds:.0f}s, artifacts in {out}")


if __name__ == "__main__":
    main()
