"""Command-line entry point: ``msra <subcommand> [--config file.toml] [flags]``.

Settings resolve as built-in defaults, then the config file (top-level keys
plus a table named after the subcommand), then command-line flags.
Exit status: 0 success, 1 invalid input or configuration, 2 certification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from msra import certify
from msra.core import Alphabet, validate_grid
from msra.decode import GroupingStrategy, argmax_grid, decode_with_strategy
from msra.lattice import LambdaParams, write_alpha_beta_csv
from msra.metrics import format_table

log = logging.getLogger("msra")

EXIT_OK, EXIT_INVALID, EXIT_CERT = 0, 1, 2


class ConfigError(ValueError):
    pass


# name -> (type, default, help); None default means "not set"
COMMON = {
    "alphabet": (str, "0123456789", "non-blank symbols; blank is class 0"),
    "lambda1": (float, 0.9, "weight of a rightward step"),
    "lambda2": (float, 0.1, "weight of a downward step"),
    "seed": (int, 0, "random seed"),
}

OPTIONS = {
    "gen": {
        "out": (str, None, "output directory"),
        "layout": (str, "stacked-rows", "stacked-rows or hv"),
        "max_sequences": (int, 2, "maximum sequences per image"),
        "min_length": (int, 1, "minimum sequence length"),
        "max_length": (int, 14, "maximum sequence length"),
        "length_mean": (float, 7.0, "mean of the clipped length distribution"),
        "length_std": (float, 3.0, "std of the clipped length distribution"),
        "glyph_gap": (int, 0, "blank pixels between glyphs of one sequence"),
        "margin": (int, 0, "minimum blank border in pixels"),
        "n_train": (int, 3000, "training samples"),
        "n_test": (int, 300, "test samples"),
        "idx_images": (str, None, "optional IDX image file for glyphs"),
        "idx_labels": (str, None, "optional IDX label file for glyphs"),
    },
    "train": {
        "data": (str, None, "dataset directory with train.jsonl/test.jsonl"),
        "out": (str, None, "output directory for checkpoint and log"),
        "epochs": (int, 30, "training epochs"),
        "batch_size": (int, 16, "mini-batch size"),
        "rho": (float, 0.95, "ADADELTA decay"),
        "eps": (float, 1e-6, "ADADELTA stabilizer"),
        "hidden": (int, 0, "hidden units (0 = affine classifier)"),
        "loss": (str, "mean", "mean (set objective) or sum_log"),
        "strategy": (str, "rows", "grouping strategy for held-out metrics"),
    },
    "eval": {
        "checkpoint": (str, None, "model checkpoint"),
        "data": (str, None, "JSONL dataset file"),
        "strategy": (str, "rows", "grouping strategy"),
        "out": (str, None, "metrics JSON path (default: stdout only)"),
    },
    "decode": {
        "grid": (str, None, "probability grid JSON file"),
        "checkpoint": (str, None, "model checkpoint (decode images instead of a grid)"),
        "data": (str, None, "JSONL dataset file to decode with --checkpoint"),
        "strategy": (str, "rows", "grouping strategy"),
        "json": (bool, False, "print JSON (one list of strings per image)"),
    },
    "gradcheck": {
        "trials": (int, 50, "random instances"),
        "tol": (float, 1e-5, "max relative error"),
        "eps": (float, 1e-6, "finite-difference step"),
        "loss": (str, "mean", "mean or sum_log"),
    },
    "oraclecheck": {
        "trials": (int, 200, "random instances"),
        "tol": (float, 1e-9, "max relative error"),
    },
    "dump-alpha": {
        "grid": (str, None, "probability grid JSON file"),
        "label": (str, None, "target sequence, e.g. 579"),
        "out": (str, None, "CSV path (default: stdout)"),
    },
}


def read_grid_json(path) -> np.ndarray:
    d = json.loads(Path(path).read_text())
    try:
        h, w, q = int(d["h"]), int(d["w"]), int(d["q"])
        probs = np.asarray(d["probs"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: grid files need h, w, q and probs ({exc})") from None
    if probs.size != h * w * q:
        raise ConfigError(f"{path}: {probs.size} probabilities for a {h}x{w}x{q} grid")
    return probs.reshape(h, w, q)


def write_grid_json(path, x: np.ndarray) -> None:
    h, w, q = x.shape
    Path(path).write_text(json.dumps({"h": h, "w": w, "q": q, "probs": x.reshape(-1).tolist()}) + "\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msra", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file")
        for key, (typ, default, help_) in {**COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None, help=f"{help_} (default: {default})")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    spec = {**COMMON, **OPTIONS[command]}
    cfg = {k: v[1] for k, v in spec.items()}
    if args.config:
        with open(args.config, "rb") as fh:
            raw = tomllib.load(fh)
        file_cfg = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        section = raw.get(command, {})
        for key, value in {**file_cfg, **section}.items():
            key = key.replace("-", "_")
            if key not in spec:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            cfg[key] = spec[key][0](value)
    for key in spec:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"missing required setting --{k.replace('_', '-')}")


def _lam(cfg) -> LambdaParams:
    return LambdaParams(cfg["lambda1"], cfg["lambda2"])


def cmd_gen(cfg) -> int:
    from msra.synthgen import DatasetSpec, builtin_glyphs, gen_dataset, load_idx

    _need(cfg, "out")
    spec = DatasetSpec(**{k: cfg[k] for k in (
        "layout", "max_sequences", "min_length", "max_length", "length_mean", "length_std",
        "glyph_gap", "margin", "n_train", "n_test", "seed", "alphabet")})
    if cfg["idx_images"] or cfg["idx_labels"]:
        _need(cfg, "idx_images", "idx_labels")
        glyphs = load_idx(cfg["idx_images"], cfg["idx_labels"], Alphabet(cfg["alphabet"]))
    else:
        glyphs = builtin_glyphs()
    paths = gen_dataset(spec, cfg["out"], glyphs)
    print(json.dumps(paths, indent=2))
    return EXIT_OK


def cmd_train(cfg) -> int:
    from msra.model import TrainConfig, train
    from msra.synthgen import read_dataset

    _need(cfg, "data", "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], rho=cfg["rho"], eps=cfg["eps"],
        lambda1=cfg["lambda1"], lambda2=cfg["lambda2"], seed=cfg["seed"], loss=cfg["loss"],
        hidden=cfg["hidden"], strategy=cfg["strategy"], alphabet=cfg["alphabet"],
        checkpoint=str(out / "model.ckpt"), log_path=str(out / "train_log.json"),
    )
    data = Path(cfg["data"])
    train_recs = read_dataset(data / "train.jsonl")
    test_path = data / "test.jsonl"
    test_recs = read_dataset(test_path) if test_path.exists() else None
    train(train_recs, tc, test_records=test_recs,
          on_epoch=lambda e: print(json.dumps(e, sort_keys=True), flush=True))
    return EXIT_OK


def cmd_eval(cfg) -> int:
    from msra.model import evaluate, load_checkpoint
    from msra.synthgen import read_dataset

    _need(cfg, "checkpoint", "data")
    model, _ = load_checkpoint(cfg["checkpoint"])
    metrics = evaluate(model, read_dataset(cfg["data"]), GroupingStrategy(cfg["strategy"]),
                       Alphabet(cfg["alphabet"]))
    print(format_table(metrics))
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_decode(cfg) -> int:
    alphabet = Alphabet(cfg["alphabet"])
    strategy = GroupingStrategy(cfg["strategy"])
    outputs = []
    if cfg["grid"]:
        x = read_grid_json(cfg["grid"])
        if x.shape[2] != alphabet.size:
            raise ConfigError(f"grid has q={x.shape[2]} but the alphabet has {alphabet.size} classes")
        diag = validate_grid(x)
        if diag:
            raise ConfigError(f"invalid grid: {diag.summary()}")
        outputs.append(decode_with_strategy(argmax_grid(x), strategy, alphabet).strings(alphabet))
    else:
        from msra.model import predict, load_checkpoint
        from msra.synthgen import read_dataset

        _need(cfg, "checkpoint", "data")
        model, _ = load_checkpoint(cfg["checkpoint"])
        for rec in read_dataset(cfg["data"]):
            outputs.append(predict(model, rec.image, strategy, alphabet))
    if cfg["json"]:
        print(json.dumps(outputs))
    else:
        for seqs in outputs:
            print("\n".join(seqs) if len(outputs) == 1 else " ".join(seqs))
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    results = certify.gradcheck_suite(cfg["trials"], cfg["seed"], _lam(cfg), cfg["eps"], cfg["tol"], cfg["loss"])
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CERT


def cmd_oraclecheck(cfg) -> int:
    results = [
        certify.oracle_suite(cfg["trials"], cfg["seed"], _lam(cfg), cfg["tol"]),
        certify.antidiagonal_suite(max(1, cfg["trials"] // 4), cfg["seed"], _lam(cfg), cfg["tol"]),
    ]
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CERT


def cmd_dump_alpha(cfg) -> int:
    _need(cfg, "grid", "label")
    x = read_grid_json(cfg["grid"])
    label = Alphabet(cfg["alphabet"]).encode(cfg["label"])
    if cfg["out"]:
        with open(cfg["out"], "w", newline="") as fh:
            write_alpha_beta_csv(x, label, _lam(cfg), fh)
    else:
        write_alpha_beta_csv(x, label, _lam(cfg), sys.stdout)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "gradcheck": cmd_gradcheck,
    "oraclecheck": cmd_oraclecheck,
    "dump-alpha": cmd_dump_alpha,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        log.info("resolved config for %s: %s", args.command, json.dumps(cfg, sort_keys=True))
        return COMMANDS[args.command](cfg)
    except (ValueError, OSError, tomllib.TOMLDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
