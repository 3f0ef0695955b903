"""Command-line entry point: ``lnsr <subcommand> [options]``.

Every option that names a config key overrides that key; ``--set key=value``
reaches any other key by dotted path.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .encoder import ConfigError, EncoderModel, load_snapshot, save_snapshot
from .harness.config import dump_config, load_config
from .harness.train import NumericalAbort, build_task, resolve_encoder, train
from .regularizers import RegularizerError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

# flag dest -> dotted config key
_FLAG_KEYS = {
    "seed": "seed",
    "learning_rate": "learning_rate",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "warmup_fraction": "warmup_fraction",
    "regularizer": "regularizer.kind",
    "sigma": "regularizer.sigma",
    "inject_layer": "regularizer.inject_layer",
    "layer_weights": "regularizer.layer_weights",
    "lnsr_backprop_below": "regularizer.backprop_below",
    "alpha": "regularizer.alpha",
    "beta": "regularizer.beta",
    "mixout_prob": "regularizer.prob",
    "mixout_rescale": "regularizer.rescale",
    "bias_correction": "optimizer.bias_correction",
    "task": "data.kind",
    "train_size": "data.train_size",
    "eval_size": "data.eval_size",
    "data_seed": "data.seed",
    "train_path": "data.train_path",
    "eval_path": "data.eval_path",
    "subsample_ratio": "data.subsample_ratio",
    "no_pretrain": "pretrain.enabled",
    "snapshot": "pretrain.snapshot",
    "probe_scale": "probe.scale",
}


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config")
    g.add_argument("--config", help="YAML config file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any dotted config key")
    g.add_argument("--seed", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--warmup-fraction", type=float)
    g.add_argument("--regularizer", choices=["none", "lnsr", "l2sp", "mixout", "noise"])
    g.add_argument("--sigma", type=float)
    g.add_argument("--inject-layer", type=int)
    g.add_argument("--layer-weights", type=lambda s: [float(x) for x in s.split(",")], metavar="W1,W2,...")
    g.add_argument("--lnsr-backprop-below", action="store_const", const=True)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--mixout-prob", type=float)
    g.add_argument("--mixout-rescale", action="store_const", const=True)
    g.add_argument("--bias-correction", action="store_const", const=True)
    g.add_argument("--task", choices=["pattern", "pair", "acceptability", "tsv"])
    g.add_argument("--train-size", type=int)
    g.add_argument("--eval-size", type=int)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--train-path")
    g.add_argument("--eval-path")
    g.add_argument("--subsample-ratio", type=float)
    g.add_argument("--no-pretrain", action="store_const", const=False)
    g.add_argument("--snapshot", help="load the pre-trained body from this snapshot file")
    g.add_argument("--probe-scale", type=float)


def config_from_args(args: argparse.Namespace):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for dest, key in _FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            overrides[key] = val
    return load_config(args.config, overrides)


def _parse_seeds(text: str) -> list[int]:
    """``0-9`` or ``1,4,7`` (or a mix)."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def _emit(obj, out: str | None) -> None:
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2, sort_keys=True, default=float)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


# -- subcommands -------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = config_from_args(args)
    record = train(cfg)
    _emit(record.to_json(), args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness.sweep import compare_ft_lnsr, format_comparison, seed_sweep

    cfg = config_from_args(args)
    seeds = _parse_seeds(args.seeds)
    if args.compare:
        res = compare_ft_lnsr(cfg, seeds, args.workers, args.out_dir)
        print(format_comparison([res.ft, res.lnsr]))
        print(json.dumps({"data_seed": res.data_seed, "checks": res.checks, "probe_lower": res.probe_lower}))
        return EXIT_OK
    summary = seed_sweep(cfg, seeds, args.workers, out_dir=args.out_dir)
    print(format_comparison([summary]))
    return EXIT_OK


def cmd_subsample(args) -> int:
    from .harness.sweep import format_comparison, subsample_study, write_subsample_csv

    cfg = config_from_args(args)
    ratios = [float(r) for r in args.ratios.split(",")]
    seeds = _parse_seeds(args.seeds)
    methods = args.methods.split(",")
    studies = {}
    for m in methods:
        mcfg = cfg.with_seed(cfg.seed)
        mcfg.regularizer.kind = m
        studies[m] = subsample_study(mcfg, ratios, seeds, args.workers)
    for per_ratio in studies.values():
        print(format_comparison(list(per_ratio.values())))
    if args.out:
        write_subsample_csv(studies, args.out)
    return EXIT_OK


def cmd_probe(args) -> int:
    from .probe import run_probe

    cfg = config_from_args(args)
    task = build_task(cfg)
    if args.params:
        params, _ = load_snapshot(args.params)
    else:
        _, params = train(cfg, task=task, return_params=True)
    model = EncoderModel(params.config)
    examples = task.eval.sequences[: args.max_examples] if args.max_examples else task.eval.sequences
    rng = np.random.default_rng([cfg.seed, 99])
    curve = run_probe(model, params, examples, args.layer, cfg.probe.scale, rng, cfg.probe.draws)
    if args.out:
        curve.write_csv(args.out, {"config_hash": cfg.config_hash(), "seed": cfg.seed})
    print(json.dumps(curve.to_dict(), indent=2, default=float))
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    from .theory import NAMED_FUNCTIONS, verify_expansion

    rng = np.random.default_rng(args.seed)
    fn = NAMED_FUNCTIONS[args.function](args.dim, rng)
    x = rng.normal(size=args.dim)
    sigmas = [float(s) for s in args.sigmas.split(",")]
    study = verify_expansion(fn, x, sigmas, args.samples, seed=args.seed)
    _emit({"function": args.function, "x": x.tolist(), **study.to_dict()}, args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .harness.pretrain import pretrain_surrogate

    cfg = config_from_args(args)
    enc = resolve_encoder(cfg, build_task(cfg))
    res = pretrain_surrogate(enc, cfg.pretrain)
    save_snapshot(res.params, args.out, res.summary())
    print(json.dumps(res.summary(), indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness.sweep import format_comparison, load_sweep, write_comparison_csv

    summaries = [load_sweep(d) for d in args.dirs]
    print(format_comparison(summaries))
    if args.out:
        write_comparison_csv(summaries, args.out)
    return EXIT_OK


def cmd_show_config(args) -> int:
    print(dump_config(config_from_args(args)), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lnsr", description="Layer-wise noise stability regularization lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="fine-tune one seed and print its run record")
    _config_flags(s)
    s.add_argument("--out", help="write the JSON run record here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run several seeds and summarize")
    _config_flags(s)
    s.add_argument("--seeds", default="0-9")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-dir")
    s.add_argument("--compare", action="store_true", help="run FT and LNSR side by side")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("subsample", help="sweeps over training-set sampling ratios")
    _config_flags(s)
    s.add_argument("--ratios", default="0.15,0.3,0.5")
    s.add_argument("--seeds", default="0-4")
    s.add_argument("--methods", default="none,lnsr")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", help="CSV path")
    s.set_defaults(func=cmd_subsample)

    s = sub.add_parser("probe", help="per-layer noise attenuation curve")
    _config_flags(s)
    s.add_argument("--params", help="probe this snapshot instead of training first")
    s.add_argument("--layer", type=int, default=0, help="inject at the output of this layer (0 = embeddings)")
    s.add_argument("--max-examples", type=int)
    s.add_argument("--out", help="CSV path")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("verify-theory", help="compare Monte Carlo noise stability with its expansion")
    s.add_argument("--function", default="mlp", choices=["mlp", "tanh", "cubic", "linear", "identity"])
    s.add_argument("--dim", type=int, default=4)
    s.add_argument("--sigmas", default="0.001,0.003,0.01")
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="JSON path")
    s.set_defaults(func=cmd_verify_theory)

    s = sub.add_parser("pretrain", help="surrogate masked-token pre-training; writes a snapshot")
    _config_flags(s)
    s.add_argument("--out", required=True, help="snapshot path")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("report", help="comparison table from saved sweep directories")
    s.add_argument("dirs", nargs="+")
    s.add_argument("--out", help="CSV path")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("show-config", help="print the resolved config")
    _config_flags(s)
    s.set_defaults(func=cmd_show_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, RegularizerError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
