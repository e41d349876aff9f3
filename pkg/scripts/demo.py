"""Generate a small dataset, train CML for a few hundred episodes, and evaluate.

    python scripts/demo.py --episodes 200 --out runs/demo
"""

import argparse
import json
from pathlib import Path

from fsfg.datagen import GeneratorConfig, generate, write_dataset
from fsfg.episodes import EpisodeSpec, make_split
from fsfg.evaluator import bottom_up_mass, evaluate
from fsfg.network import save_checkpoint
from fsfg.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--gap", type=float, default=1.0)
    ap.add_argument("--lr", type=float, default=0.02)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/demo")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate(GeneratorConfig(num_classes=6, samples_per_class=20, inter_class_gap=args.gap,
                                    noise_sigma=0.05, seed=args.seed))
    write_dataset(data, out / "data.fsfg")
    split = make_split(data, 0.5, seed=args.seed)
    spec = EpisodeSpec(3, 1, 5)

    every = max(1, args.episodes // 10)
    show = lambda r: r["episode"] % every == 0 and print(  # noqa: E731
        f"episode {r['episode']:4d}  loss {r['loss_total']:.3f}  lr {r['lr']:.4f}")
    params, log = train(data, split, TrainConfig(total_episodes=args.episodes, spec=spec, lr=args.lr,
                                                 seed=args.seed), progress=show)
    save_checkpoint(params, out / "model.ckpt", {"split": split.to_dict()})
    log.write_csv(out / "train_log.csv")

    summary = {"train_seconds": round(log.seconds, 1)}
    for method in ("cml", "protonet"):
        rep = evaluate(params, data, split, spec, 300, method, seed=args.seed)
        summary[method] = {"mean_accuracy": rep.mean_accuracy, "ci95": rep.ci95_halfwidth}
    by = data.indices_by_class()
    held_out = [i for c in split.test_classes for i in by[c][:7]][:20]
    summary["bottom_up_mass_scale1"] = float(bottom_up_mass(params, data, held_out, 1).mean())
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
