"""CATL-QTA-M predicting its own question type, against CATL-QTA on the same budget."""

import argparse
import json

from qta.experiments import ROUTING_EPOCHS, run_multitask, summary


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=ROUTING_EPOCHS)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--lam", type=float, default=0.2, help="weight of the type loss")
    args = parser.parse_args()
    result = run_multitask(epochs=args.epochs, seed=args.seed, lam=args.lam)
    print(json.dumps(summary(result), indent=2))


if __name__ == "__main__":
    main()
