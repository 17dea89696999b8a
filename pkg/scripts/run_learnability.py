"""Leave-one-event-out teacher training on the default synthetic benchmark."""
import argparse
import json

from tgnn.experiments import sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0", help="comma-separated master seeds")
    ap.add_argument("--generator", default="{}", help="JSON overrides for GeneratorConfig")
    ap.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    res = sweep(seeds, ("teacher",), generator=json.loads(args.generator), jobs=args.jobs)
    for seed, reps in res.reports.items():
        print(f"# seed {seed}")
        print(reps["teacher"].table(), end="")
    print(f"mean accuracy {res.mean('teacher', 'accuracy'):.2f}  mean macro F1 {res.mean('teacher'):.2f}  "
          f"({res.seconds:.0f}s)")


if __name__ == "__main__":
    main()
