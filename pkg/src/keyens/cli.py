"""Command-line entry point: ``keyens {train,attack,evaluate,keys gen}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import KeyensError
from .harness.config import ExperimentConfig, load_config
from .harness.experiment import (ExperimentFailed, build_pipelines, evaluate_pipelines, load_datasets,
                                 load_models, run_experiment, save_models, train_models, write_report)
from .model import jsonl_progress
from .transform import gen_key, save_key

log = logging.getLogger("keyens")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    output = cfg.output
    changes = {}
    if getattr(args, "out_dir", None):
        changes["dir"] = args.out_dir
    if getattr(args, "format", None):
        changes["format"] = args.format
    if getattr(args, "trace", False):
        changes["trace"] = True
    if changes:
        cfg.output = dataclasses.replace(output, **changes)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "num_eval", None) is not None:
        cfg.eval.num_eval = args.num_eval
    cfg.__post_init__()
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    train, _ = load_datasets(cfg)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w") as fh:
        baseline, ensemble = train_models(cfg, train, jsonl_progress(fh))
    manifest = save_models(baseline, ensemble, out / "models")
    print(manifest)
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    attacks = [a.strip() for a in args.attacks.split(",") if a.strip()] if args.attacks else None
    if attacks:
        cfg.attack.names = attacks
        cfg.__post_init__()
    _, test = load_datasets(cfg)
    baseline, ensemble = load_models(args.model)
    out = Path(cfg.output.dir)
    trace_dir = out / "traces" if cfg.output.trace else None
    report = evaluate_pipelines(cfg, build_pipelines(cfg, baseline, ensemble), test, trace_dir=trace_dir)
    write_report(report, cfg, out)
    sys.stdout.write(report.render(cfg.output.format))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, cfg.output.dir)
    sys.stdout.write(report.render(cfg.output.format))
    return EXIT_OK


def cmd_keys_gen(args) -> int:
    key = gen_key(args.seed, args.block, args.channels)
    save_key(key, args.out)
    print(json.dumps({"key_id": key.key_id, "seed": key.seed, "block_size": key.block_size,
                      "channels": key.channels, "out": str(args.out)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keyens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, attack_opts=True):
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out-dir", help="override output.dir")
        if attack_opts:
            p.add_argument("--format", choices=["table", "csv", "jsonl"])
            p.add_argument("--trace", action="store_true", help="write Square attack traces")
            p.add_argument("--num-eval", type=int, help="number of test images to attack")

    p = sub.add_parser("train", help="train baseline and sub-models, write checkpoints and manifest")
    common(p, attack_opts=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run the attack suite against trained models")
    common(p)
    p.add_argument("--model", required=True, help="ensemble manifest written by `train`")
    p.add_argument("--attacks", help="comma-separated subset of fgsm,pgd,pgd-t,square")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="train and attack: the full experiment")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    keys = sub.add_parser("keys", help="key utilities")
    ksub = keys.add_subparsers(dest="keys_command", required=True)
    p = ksub.add_parser("gen", help="write a key file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keys_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ExperimentFailed as exc:
        log.error("experiment failed: %s", exc)
        return EXIT_RUNTIME
    except KeyensError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
