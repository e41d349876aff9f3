"""Way-count and query-count sweeps of CML against ProtoNet.

Trains one model per (method, train spec, seed) on a low-gap dataset and tests
every model on 5-way 2-shot 2-query episodes. Writes one CSV per sweep.

    python scripts/run_sweeps.py --sweep way --train-episodes 300 --out runs/sweeps
"""

import argparse
from pathlib import Path

from fsfg.datagen import GeneratorConfig, generate
from fsfg.episodes import EpisodeSpec, make_split
from fsfg.evaluator import compare
from fsfg.trainer import TrainConfig

SWEEPS = {
    "way": [EpisodeSpec(n, 2, 2) for n in (5, 6, 8, 10)],
    "query": [EpisodeSpec(5, 2, q) for q in (3, 5, 7, 9)],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sweep", choices=[*SWEEPS, "both"], default="both")
    ap.add_argument("--classes", type=int, default=24, help="half are held out, so >= 20 for 10-way training")
    ap.add_argument("--per-class", type=int, default=12)
    ap.add_argument("--gap", type=float, default=0.15)
    ap.add_argument("--train-episodes", type=int, default=300)
    ap.add_argument("--test-episodes", type=int, default=500)
    ap.add_argument("--lr", type=float, default=0.02)
    ap.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], default=[0])
    ap.add_argument("--out", default="runs/sweeps")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate(GeneratorConfig(num_classes=args.classes, samples_per_class=args.per_class,
                                    inter_class_gap=args.gap, noise_sigma=0.05, seed=0))
    split = make_split(data, 0.5, seed=0)
    base = TrainConfig(total_episodes=args.train_episodes, lr=args.lr)
    test_spec = EpisodeSpec(5, 2, 2)
    show = lambda m, s, seed, rep: print(  # noqa: E731
        f"{m:9s} train {s.n_way}-way {s.k_shot}-shot {s.q_query}-query seed {seed}: {rep.mean_accuracy:.3f}")
    for name in SWEEPS if args.sweep == "both" else [args.sweep]:
        table = compare(data, split, SWEEPS[name], test_spec, seeds=args.seeds, base_config=base,
                        num_episodes=args.test_episodes, progress=show)
        for r in table.rows:
            if r.status != "ok":
                print(f"{r.method:9s} train {r.train_spec.n_way}-way {r.train_spec.q_query}-query: {r.status}")
        print(f"wrote {table.write_csv(out / f'{name}_sweep.csv')}")


if __name__ == "__main__":
    main()
