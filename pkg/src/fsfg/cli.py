"""Command-line entry point: ``fsfg {gen,train,eval,pairs,gradcheck,compare}``.

Configuration is a nested JSON document (sections ``data``, ``split``,
``train``, ``eval``, ``compare``); flags override the file, and the merged
result is validated before any compute and embedded in every artifact.
Data goes to stdout or files, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path


from . import __version__
from .checks import run_checks
from .datagen import ConfigError, GeneratorConfig, generate, read_dataset, write_dataset
from .episodes import EpisodeSpec, SamplingError, Split, SplitError, make_split
from .evaluator import compare, evaluate
from .formats import FormatError
from .metalearn import pair_counts_bruteforce, pair_counts_ce, pair_counts_cml
from .network import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainingError, train

DEFAULTS = {
    "data": GeneratorConfig().to_dict(),
    "split": {"test_fraction": 0.5, "seed": 0, "min_test_classes": 1},
    "train": TrainConfig().to_dict(),
    "eval": {"spec": {"n_way": 5, "k_shot": 1, "q_query": 5}, "num_episodes": 1000, "method": "cml",
             "seed": 0},
    "compare": {
        "train_specs": [{"n_way": n, "k_shot": 2, "q_query": 2} for n in (5, 6, 8, 10)],
        "test_spec": {"n_way": 5, "k_shot": 2, "q_query": 2},
        "methods": ["cml", "protonet"],
        "seeds": [0],
        "num_episodes": 1000,
    },
    "threads": 1,
}


@dataclass
class RunConfig:
    """Merged, validated configuration for one CLI invocation."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @property
    def data(self) -> GeneratorConfig:
        return GeneratorConfig.from_dict(self.raw["data"])

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(**self.raw["train"])

    @property
    def eval_spec(self) -> EpisodeSpec:
        return EpisodeSpec(**self.raw["eval"]["spec"])

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.train.validate()
        self.eval_spec
        if self.raw["eval"]["method"] not in ("cml", "protonet"):
            raise ConfigError(f"unknown eval method {self.raw['eval']['method']!r}")
        if int(self.raw["eval"]["num_episodes"]) < 1:
            raise ConfigError("eval.num_episodes must be positive")
        if not 0 < float(self.raw["split"]["test_fraction"]) < 1:
            raise ConfigError("split.test_fraction must lie in (0, 1)")
        c = self.raw["compare"]
        for s in c["train_specs"] + [c["test_spec"]]:
            EpisodeSpec(**s)
        if int(self.raw["threads"]) < 1:
            raise ConfigError("threads must be positive")
        return self

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(v, dict) and isinstance(out[k], dict) and k != "spec":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _spec(text: str) -> dict:
    try:
        n, k, q = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N,K,Q, got {text!r}") from None
    return {"n_way": n, "k_shot": k, "q_query": q}


def build_config(args: argparse.Namespace) -> RunConfig:
    raw = copy.deepcopy(DEFAULTS)
    if args.config:
        raw = _merge(raw, json.loads(Path(args.config).read_text()))
    d, t, e, c, sp = raw["data"], raw["train"], raw["eval"], raw["compare"], raw["split"]
    if args.seed is not None:
        # one run seed drives every stage unless a stage flag says otherwise
        d["seed"] = t["seed"] = e["seed"] = sp["seed"] = int(args.seed)
        c["seeds"] = [int(args.seed)]
    if args.threads is not None:
        raw["threads"] = int(args.threads)
    set_ = lambda section, key, value: value is not None and section.__setitem__(key, value)  # noqa: E731
    g = lambda name: getattr(args, name, None)  # noqa: E731
    set_(d, "num_classes", g("classes"))
    set_(d, "samples_per_class", g("per_class"))
    set_(d, "inter_class_gap", g("gap"))
    set_(d, "noise_sigma", g("noise"))
    set_(d, "distractor_count", g("distractors"))
    set_(sp, "test_fraction", g("test_fraction"))
    if args.command == "train":
        set_(t, "method", g("method"))
        set_(t, "total_episodes", g("episodes"))
        set_(t, "lr", g("lr"))
        set_(t, "alpha", g("alpha"))
        set_(t, "beta", g("beta"))
        set_(t, "tau", g("tau"))
        spec = dict(t["spec"])
        for key, flag in (("n_way", "n"), ("k_shot", "k"), ("q_query", "q")):
            set_(spec, key, g(flag))
        t["spec"] = spec
    if args.command == "eval":
        set_(e, "method", g("method"))
        set_(e, "num_episodes", g("episodes"))
        spec = dict(e["spec"])
        for key, flag in (("n_way", "n"), ("k_shot", "k"), ("q_query", "q")):
            set_(spec, key, g(flag))
        e["spec"] = spec
    if args.command == "compare":
        set_(c, "methods", g("methods"))
        set_(c, "seeds", g("seeds"))
        set_(c, "num_episodes", g("episodes"))
        set_(c, "test_spec", g("test"))
        set_(t, "total_episodes", g("train_episodes"))
        set_(t, "lr", g("lr"))
        if g("sweep") == "way":
            c["train_specs"] = [{"n_way": n, "k_shot": 2, "q_query": 2} for n in (5, 6, 8, 10)]
        elif g("sweep") == "query":
            c["train_specs"] = [{"n_way": 5, "k_shot": 2, "q_query": q} for q in (3, 5, 7, 9)]
        set_(c, "train_specs", g("grid"))
    return RunConfig(raw).validate()


def provenance(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, "config": cfg.to_dict(), **extra}


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _emit(obj, out: str | None = None):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _split_for(cfg: RunConfig, dataset) -> Split:
    sp = cfg.raw["split"]
    return make_split(dataset, float(sp["test_fraction"]), int(sp["seed"]), int(sp.get("min_test_classes", 1)))


# ---------------------------------------------------------------- commands


def cmd_gen(args, cfg: RunConfig) -> int:
    if not args.out:
        raise ConfigError("gen needs -o/--out")
    start = time.perf_counter()
    data = generate(cfg.data)
    write_dataset(data, args.out, provenance(cfg, "gen"))
    counts = {data.class_names[c]: n for c, n in sorted(data.class_counts().items())}
    _log(f"wrote {len(data)} clips to {args.out} in {time.perf_counter() - start:.2f}s")
    _emit({"path": args.out, "num_clips": len(data), "class_counts": counts})
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if not args.out:
        raise ConfigError("train needs -o/--out for the checkpoint")
    data = read_dataset(args.data)
    split = _split_for(cfg, data)
    tcfg = cfg.train
    every = max(1, tcfg.total_episodes // 20)
    progress = lambda r: (r["episode"] % every == 0 and _log(  # noqa: E731
        f"ep {r['episode']:5d} loss {r['loss_total']:.4f} meta {r['loss_meta']:.4f} lr {r['lr']:.2e}"))
    params, log = train(data, split, tcfg, progress=progress)
    log_path = args.log or f"{args.out}.log.csv"
    log.write_csv(log_path)
    prov = provenance(cfg, "train", split=split.to_dict(), seconds=log.seconds, log=log_path)
    save_checkpoint(params, args.out, prov)
    _log(f"trained {tcfg.total_episodes} episodes in {log.seconds:.1f}s")
    _emit({"checkpoint": args.out, "log": log_path, "episodes": len(log.records),
           "final_loss": log.records[-1]["loss_total"] if log.records else None, "provenance": prov})
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    data = read_dataset(args.data)
    # prefer the split the checkpoint was trained with, so test classes stay unseen
    if "split" in meta and not args.config_split:
        split = Split.from_dict(meta["split"])
    else:
        split = _split_for(cfg, data)
    e = cfg.raw["eval"]
    rep = evaluate(params, data, split, cfg.eval_spec, int(e["num_episodes"]), e["method"], int(e["seed"]),
                   threads=int(cfg.raw["threads"]))
    rep.provenance = provenance(cfg, "eval", split=split.to_dict(), checkpoint=args.checkpoint,
                                checkpoint_provenance=meta)
    if args.episodes_csv:
        rep.write_episodes_csv(args.episodes_csv)
    if args.confusion_csv:
        rep.write_confusion_csv(args.confusion_csv)
    _log(f"{rep.method}: {rep.mean_accuracy:.4f} +- {rep.ci95_halfwidth:.4f} over {rep.num_episodes} episodes")
    _emit(rep.to_dict(per_episode=not args.summary), args.out)
    return 0


def _pair_row(n, k, q) -> dict:
    ce, cml = pair_counts_ce(n, k, q), pair_counts_cml(n, k, q)
    bce, bcml = pair_counts_bruteforce(n, k, q, "ce"), pair_counts_bruteforce(n, k, q, "cml")
    return {"N": n, "K": k, "Q": q, "ce": list(ce.as_tuple()), "cml": list(cml.as_tuple()),
            "brute_ce": list(bce.as_tuple()), "brute_cml": list(bcml.as_tuple()),
            "match": ce == bce and cml == bcml}


def cmd_pairs(args, cfg: RunConfig) -> int:
    if args.grid:
        r = range(1, args.grid + 1)
        grid = [(n, k, q) for n in r for k in r for q in r]
    else:
        grid = [(args.n, args.k, args.q)]
    if any(min(p) < 1 for p in grid):
        raise ConfigError("N, K and Q must be positive")
    rows = [_pair_row(*p) for p in grid]
    if args.json:
        _emit({"rows": rows, "provenance": provenance(cfg, "pairs")})
    else:
        fmt = lambda t: "(" + ",".join(map(str, t)) + ")"  # noqa: E731
        for row in rows:
            print(f"N={row['N']} K={row['K']} Q={row['Q']} ce:{fmt(row['ce'])} cml:{fmt(row['cml'])} "
                  f"brute_ce:{fmt(row['brute_ce'])} brute_cml:{fmt(row['brute_cml'])} "
                  f"match={'true' if row['match'] else 'false'}")
    bad = sum(not r["match"] for r in rows)
    _log(f"{len(rows)} rows, {bad} mismatches")
    return 1 if bad else 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = int(cfg.raw["train"]["seed"]) if args.seed is None else int(args.seed)
    results = run_checks(args.op or None, seed=seed, tolerance=args.tolerance, inject_fault=args.inject_fault)
    for r in results:
        rep = r.report
        status = "PASS" if rep.passed else "FAIL"
        line = f"{status} {r.name:22s} max_rel_error={rep.max_error:.3e}"
        if not rep.passed and rep.worst is not None:
            w = rep.worst
            line += f" at {w.param}{list(w.index)} analytic={w.analytic:.6e} numeric={w.numeric:.6e}"
        _log(line)
    failed = [r.name for r in results if not r.report.passed]
    _emit({"checks": [r.to_dict() for r in results], "failed": failed,
           "provenance": provenance(cfg, "gradcheck", seed=seed)})
    return 1 if failed else 0


def cmd_compare(args, cfg: RunConfig) -> int:
    data = read_dataset(args.data)
    split = _split_for(cfg, data)
    c = cfg.raw["compare"]
    progress = lambda m, s, seed, rep: _log(  # noqa: E731
        f"{m} train {s.n_way}-{s.k_shot}-{s.q_query} seed {seed}: {rep.mean_accuracy:.4f}")
    table = compare(data, split, [EpisodeSpec(**s) for s in c["train_specs"]], EpisodeSpec(**c["test_spec"]),
                    methods=c["methods"], seeds=[int(s) for s in c["seeds"]], base_config=cfg.train,
                    num_episodes=int(c["num_episodes"]), eval_seed=int(cfg.raw["eval"]["seed"]),
                    threads=int(cfg.raw["threads"]), progress=progress)
    table.provenance = provenance(cfg, "compare", split=split.to_dict())
    if args.csv:
        table.write_csv(args.csv)
    _emit(table.to_dict(), args.out)
    return 1 if any(r.status != "ok" for r in table.rows) else 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "pairs": cmd_pairs,
            "gradcheck": cmd_gradcheck, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, default):
        # subcommand copies use SUPPRESS so they never clobber flags given before the subcommand
        parser.add_argument("--config", default=default, help="JSON config file (flags override it)")
        parser.add_argument("--seed", type=int, default=default, help="seed for every stage")
        parser.add_argument("--threads", type=int, default=default, help="worker threads for evaluation")
        parser.add_argument("--dry-run", action="store_true", default=default or False,
                            help="print the merged config and exit")

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="fsfg",
                                description="Few-shot fine-grained action recognition on synthetic clips.")
    global_flags(p, None)
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--classes", type=int)
        sp.add_argument("--per-class", type=int)
        sp.add_argument("--gap", type=float)
        sp.add_argument("--noise", type=float)
        sp.add_argument("--distractors", type=int)

    def spec_flags(sp):
        sp.add_argument("--n", type=int)
        sp.add_argument("--k", type=int)
        sp.add_argument("--q", type=int)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    data_flags(g)
    g.add_argument("-o", "--out")

    t = sub.add_parser("train", parents=[common], help="episodic training")
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=("cml", "protonet"))
    spec_flags(t)
    t.add_argument("--episodes", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--test-fraction", type=float)
    t.add_argument("-o", "--out")
    t.add_argument("--log", help="training log CSV (default: <checkpoint>.log.csv)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on test episodes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--method", choices=("cml", "protonet"))
    spec_flags(e)
    e.add_argument("--episodes", type=int)
    e.add_argument("--test-fraction", type=float)
    e.add_argument("--config-split", action="store_true",
                   help="derive the split from the config instead of the checkpoint")
    e.add_argument("--summary", action="store_true", help="omit per-episode accuracies")
    e.add_argument("--episodes-csv")
    e.add_argument("--confusion-csv")
    e.add_argument("-o", "--out")

    pr = sub.add_parser("pairs", parents=[common], help="contrastive pair counts")
    pr.add_argument("--n", type=int, default=5)
    pr.add_argument("--k", type=int, default=1)
    pr.add_argument("--q", type=int, default=5)
    pr.add_argument("--grid", type=int, help="all (N,K,Q) in [1..G]^3")
    pr.add_argument("--json", action="store_true")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--op", action="append", help="restrict to this check (repeatable)")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--inject-fault", action="store_true", help="add a check with a deliberately wrong gradient")

    c = sub.add_parser("compare", parents=[common], help="CML vs ProtoNet sweep")
    c.add_argument("--data", required=True)
    c.add_argument("--sweep", choices=("way", "query"))
    c.add_argument("--grid", type=lambda s: [_spec(x) for x in s.split(";")],
                   help="train specs as 'N,K,Q;N,K,Q'")
    c.add_argument("--test", type=_spec, help="test spec N,K,Q")
    c.add_argument("--methods", type=lambda s: s.split(","))
    c.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")])
    c.add_argument("--episodes", type=int, help="test episodes per cell")
    c.add_argument("--train-episodes", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--test-fraction", type=float)
    c.add_argument("-o", "--out")
    c.add_argument("--csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        if args.dry_run:
            print(json.dumps(cfg.to_dict(), indent=2))
            return 0
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, SplitError, SamplingError, FormatError, TrainingError, KeyError,
            ValueError, OSError) as exc:
        _log(f"error: {type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
