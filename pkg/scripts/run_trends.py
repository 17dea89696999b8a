"""Teacher vs text-only student vs distilled student over several master seeds."""
import argparse
import json

from tgnn.experiments import MODERATE_IMAGE, sweep
from tgnn.train import VARIANTS


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated master seeds")
    ap.add_argument("--generator", default=json.dumps(MODERATE_IMAGE), help="JSON overrides for GeneratorConfig")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = tuple(args.variants.split(","))
    res = sweep(seeds, variants, generator=json.loads(args.generator), jobs=args.jobs)
    print("seed\t" + "\t".join(variants))
    for seed, reps in res.reports.items():
        print(f"{seed}\t" + "\t".join(f"{reps[v].average.macro_f1:.2f}" for v in variants))
    print("mean\t" + "\t".join(f"{res.mean(v):.2f}" for v in variants))
    print(f"# macro F1 averaged over leave-one-event-out folds; {res.seconds:.0f}s")


if __name__ == "__main__":
    main()
