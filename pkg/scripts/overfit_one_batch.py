"""Overfit the desk U-net on one fixed batch of synthetic tiles and print the loss curve."""
import argparse
import json

from fractoseg.experiments import overfit_one_batch


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--until-target", action="store_true", help="stop once loss < 0.05 and accuracy > 0.99")
    p.add_argument("--out", help="write the loss/accuracy curve as JSON")
    args = p.parse_args()

    stop = dict(stop_loss=0.05, stop_acc=0.99) if args.until_target else {}
    res = overfit_one_batch(args.steps, args.lr, args.seed, stages=args.stages, **stop)
    for i in range(0, res.steps, 25):
        print(f"step {i:4d}  loss {res.losses[i]:.4f}  acc {res.accuracies[i]:.4f}")
    print(f"final step {res.steps}: loss {res.final_loss:.4f}  acc {res.final_accuracy:.4f}  ({res.seconds:.1f}s)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"losses": res.losses, "accuracies": res.accuracies, "seconds": res.seconds}, fh)


if __name__ == "__main__":
    main()
