"""Question-type confusion when absurd questions borrow the color template.

Sweeps the overlap fraction and prints, for each value, the absurd/color
confusion mass and the per-type prediction accuracy.
"""

import argparse
import json

from qta.experiments import TYPE_EPOCHS, run_absurd


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rho", type=float, nargs="+", default=[0.0, 0.3, 0.6, 0.9])
    parser.add_argument("--epochs", type=int, default=TYPE_EPOCHS)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    rows = []
    for rho in args.rho:
        r = run_absurd(rho, epochs=args.epochs, seed=args.seed)
        rows.append(
            {
                "rho": rho,
                "absurd_to_color": r["absurd_to_color"],
                "color_to_absurd": r["color_to_absurd"],
                "type_acc_per_type": r["type_acc_per_type"],
                "answer_overall_acc": r["report"].overall_acc,
                "confusion": json.loads(r["confusion"].to_json()),
            }
        )
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
