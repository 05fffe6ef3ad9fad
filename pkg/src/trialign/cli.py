"""Command-line entry point: gen-data, train, eval, analyze, gradcheck.

Settings resolve in one order: built-in defaults, then keys from ``--config``
(flat JSON, keys are flag names without the leading dashes), then flags given
on the command line. Every run writes the resolved settings next to its
outputs, and output filenames carry the first 12 hex digits of their hash.

Exit codes: 0 success, 2 configuration or compatibility error, 3 numeric
abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from pathlib import Path

from . import datagen, encoders, evalharness, geomviz, gradcheck, trainer
from .diffcore import NumericError
from .geometry import PAIRS, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# settings that name files or directories; they are echoed but not hashed
PATH_KEYS = {"out", "data", "checkpoint", "baseline-ranks"}

DEFAULTS = {
    "gen-data": {"seed": 42, "train-size": 8000, "test-size": 1000, "noise": 0.05, "dedup": True},
    "train": {
        "loss": "triangle", "steps": 2000, "seed": 42, "alpha": 1.0, "tau": 0.07, "lambda": 1.0,
        "no-cos-reg": False, "reg-pair": "text-video", "batch-size": 64, "lr": 1e-4,
        "weight-decay": 0.01, "eval-every": 0, "clip-grad-norm": None, "log-wall-time": False,
    },
    "eval": {"scoring": "auto", "alpha": None, "reg-pair": None, "resamples": evalharness.DEFAULT_RESAMPLES, "perm-seed": 0},
    "analyze": {"n": 200, "seed": 0, "alpha": None},
    "gradcheck": {"module": "all", "trials": 50, "seed": 0},
}
REQUIRED = {"gen-data": ["out"], "train": ["data", "out"], "eval": ["checkpoint", "data", "out"], "analyze": ["checkpoint", "data", "out"], "gradcheck": []}


class CompatibilityError(ConfigError):
    """A checkpoint does not match its recorded config or the given data."""


def _bool_flag(p: argparse.ArgumentParser, name: str, help: str) -> None:
    p.add_argument(f"--{name}", dest=name, action="store_const", const=True, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trialign", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help, argument_default=None)
        p.add_argument("--config", help="flat JSON file of flag-name keys")
        return p

    p = add("gen-data", "generate the synthetic shapes dataset")
    p.add_argument("--out", dest="out")
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--train-size", dest="train-size", type=int)
    p.add_argument("--test-size", dest="test-size", type=int)
    p.add_argument("--noise", dest="noise", type=float)
    p.add_argument("--no-dedup", dest="dedup", action="store_const", const=False, help="allow repeated scene contents")

    p = add("train", "train encoders with one of the four objectives")
    p.add_argument("--data", dest="data")
    p.add_argument("--out", dest="out")
    p.add_argument("--loss", dest="loss", choices=trainer.LOSS_KINDS)
    p.add_argument("--steps", dest="steps", type=int)
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--alpha", dest="alpha", type=float)
    p.add_argument("--tau", dest="tau", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    _bool_flag(p, "no-cos-reg", "train and score with alpha = 0")
    p.add_argument("--reg-pair", dest="reg-pair", choices=PAIRS)
    p.add_argument("--batch-size", dest="batch-size", type=int)
    p.add_argument("--lr", dest="lr", type=float)
    p.add_argument("--weight-decay", dest="weight-decay", type=float)
    p.add_argument("--eval-every", dest="eval-every", type=int)
    p.add_argument("--clip-grad-norm", dest="clip-grad-norm", type=float, nargs="?", const=1.0, help="clip the global gradient norm (1.0 when given without a value)")
    _bool_flag(p, "log-wall-time", "add wall-clock milliseconds to log lines (breaks byte-identical logs)")

    p = add("eval", "score the test split and write a metrics report")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--data", dest="data")
    p.add_argument("--out", dest="out")
    p.add_argument("--scoring", dest="scoring", choices=("auto", "triangle", "cosine", "cosine-sum", "fusion"))
    p.add_argument("--alpha", dest="alpha", type=float)
    p.add_argument("--reg-pair", dest="reg-pair", choices=PAIRS)
    p.add_argument("--baseline-ranks", dest="baseline-ranks")
    p.add_argument("--resamples", dest="resamples", type=int)
    p.add_argument("--perm-seed", dest="perm-seed", type=int)

    p = add("analyze", "export projected geometry of positive and swapped triples")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--data", dest="data")
    p.add_argument("--out", dest="out")
    p.add_argument("--n", dest="n", type=int)
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--alpha", dest="alpha", type=float)

    p = add("gradcheck", "finite-difference sweep over every analytic gradient")
    p.add_argument("--module", dest="module", choices=("all", *gradcheck.MODULES))
    p.add_argument("--trials", dest="trials", type=int)
    p.add_argument("--seed", dest="seed", type=int)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {args.config} is not valid JSON: {err}") from err
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a flat JSON object")
        allowed = set(DEFAULTS[command]) | set(REQUIRED[command]) | _optional_keys(command)
        for key, value in file_cfg.items():
            key = key.lstrip("-").replace("_", "-")
            if key not in allowed:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            cfg[key] = value
    for key, value in vars(args).items():
        if key not in ("command", "config") and value is not None:
            cfg[key] = value
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"{command} needs " + ", ".join(f"--{k}" for k in missing))
    return dict(sorted(cfg.items()))


def _optional_keys(command: str) -> set[str]:
    return {"baseline-ranks"} if command == "eval" else set()


def fingerprint(cfg: dict, extra: dict | None = None) -> str:
    hashed = {k: v for k, v in cfg.items() if k not in PATH_KEYS}
    if extra:
        hashed.update(extra)
    return trainer.config_fingerprint(hashed)


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _data_digest(path) -> str:
    path = Path(path)
    files = [path] if path.is_file() else [path / f for f in ("train.jsonl", "test.jsonl") if (path / f).exists()]
    if not files:
        raise FileNotFoundError(f"no dataset files under {path}")
    return "-".join(_file_digest(f) for f in files)


def _write_echo(out: Path, stem: str, cfg: dict) -> Path:
    path = out / f"{stem}.config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict) -> int:
    out = _outdir(cfg)
    split = datagen.generate_dataset(cfg["train-size"], cfg["test-size"], cfg["seed"], cfg["noise"], cfg["dedup"])
    paths = datagen.write_dataset(split, out, cfg["noise"], cfg["dedup"])
    fp = fingerprint(cfg)
    _write_echo(out, f"gen-data-{fp}", cfg)
    print(f"wrote {len(split.train)} train / {len(split.test)} test triplets to {out} (fingerprint {fp})")
    for p in paths.values():
        print(f"  {p}")
    return EXIT_OK


def train_config(cfg: dict) -> trainer.TrainConfig:
    alpha = 0.0 if cfg["no-cos-reg"] else cfg["alpha"]
    return trainer.TrainConfig(
        steps=cfg["steps"], batch_size=cfg["batch-size"], learning_rate=cfg["lr"], weight_decay=cfg["weight-decay"],
        loss_kind=cfg["loss"], tau=cfg["tau"], alpha=alpha, lam=cfg["lambda"], reg_pair=cfg["reg-pair"],
        seed=cfg["seed"], eval_every=cfg["eval-every"], clip_grad_norm=cfg["clip-grad-norm"],
        log_wall_time=cfg["log-wall-time"],
    )


def cmd_train(cfg: dict) -> int:
    tcfg = train_config(cfg)
    split = datagen.load_dataset(cfg["data"])
    out = _outdir(cfg)
    extra = {"dataDigest": _data_digest(cfg["data"])}
    fp = fingerprint(cfg, extra)
    stem = f"train-{fp}"
    _write_echo(out, stem, cfg)
    meta_cfg = {**cfg, "fingerprintExtra": extra}
    log_path = out / f"{stem}.log.jsonl"
    with log_path.open("w") as log_fh:
        def emit(rec):
            log_fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

        try:
            result = trainer.train_run(tcfg, split, on_record=emit)
        except trainer.NumericAbort as err:
            encoders.save_checkpoint(err.last_good, out / f"ckpt-{fp}-abort", fp, meta_cfg)
            print(f"numeric abort at step {err.step}: {err}; last good parameters saved", file=sys.stderr)
            return EXIT_NUMERIC
    blob, _ = encoders.save_checkpoint(result.params, out / f"ckpt-{fp}", fp, meta_cfg)
    last = result.log[-1] if result.log else None
    msg = f"trained {tcfg.loss_kind} for {tcfg.steps} steps"
    if last is not None:
        msg += f", final loss {last.total_loss:.4f}"
    print(f"{msg}; checkpoint {blob} (fingerprint {fp})")
    return EXIT_OK


def _load_checked(cfg: dict, split: datagen.DatasetSplit) -> tuple[encoders.ModelParams, dict]:
    params, meta = encoders.load_checkpoint(cfg["checkpoint"])
    recorded = meta.get("config") or {}
    extra = recorded.get("fingerprintExtra")
    expected = fingerprint({k: v for k, v in recorded.items() if k != "fingerprintExtra"}, extra)
    if meta.get("fingerprint") != expected:
        raise CompatibilityError(
            f"checkpoint fingerprint {meta.get('fingerprint')} does not match its recorded config ({expected})"
        )
    if split.test:
        t = split.test[0]
        dims = {"text": t.text.size, "video": t.video.size, "audio": t.audio.size}
        for name, d in dims.items():
            if getattr(params, name).input_dim != d:
                raise CompatibilityError(f"checkpoint {name} encoder expects {getattr(params, name).input_dim} features, data has {d}")
    return params, recorded


def cmd_eval(cfg: dict) -> int:
    split = datagen.load_dataset(cfg["data"])
    params, recorded = _load_checked(cfg, split)
    scoring = cfg["scoring"]
    if scoring == "auto":
        scoring = trainer.default_scoring(recorded.get("loss", "triangle"))
    alpha = cfg["alpha"]
    if alpha is None:
        alpha = 0.0 if recorded.get("no-cos-reg") else recorded.get("alpha", 1.0)
    reg_pair = cfg["reg-pair"] or recorded.get("reg-pair", "text-video")
    text, video, audio = split.arrays("test")
    matrices = evalharness.score_all(params, text, video, audio, scoring=scoring, alpha=alpha, reg_pair=reg_pair)
    baseline = evalharness.read_ranks(cfg["baseline-ranks"]) if cfg.get("baseline-ranks") else None
    extra = {"checkpoint": _file_digest(Path(cfg["checkpoint"]).with_suffix(".bin")), "dataDigest": _data_digest(cfg["data"])}
    if baseline is not None:
        extra["baseline"] = _file_digest(Path(cfg["baseline-ranks"]))
    fp = fingerprint(cfg, extra)
    report = evalharness.build_report(matrices, baseline, resamples=cfg["resamples"], seed=cfg["perm-seed"], fingerprint=fp)
    out = _outdir(cfg)
    stem = f"eval-{fp}"
    _write_echo(out, stem, cfg)
    path, ranks_path = evalharness.write_report(report, out / f"{stem}.report.json")
    for d, rep in report.directions.items():
        line = "  ".join(f"{k}={v:.4f}" for k, v in rep.metrics().items())
        if d in report.p_values:
            line += "  p(rr10)=" + f"{report.p_values[d]['rr10']:.4g}"
        print(f"{d:<5} {line}")
    print(f"report {path}; ranks {ranks_path}")
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    if cfg["n"] < 2:
        raise ConfigError("--n must be at least 2")
    split = datagen.load_dataset(cfg["data"])
    params, recorded = _load_checked(cfg, split)
    alpha = cfg["alpha"]
    if alpha is None:
        alpha = 0.0 if recorded.get("no-cos-reg") else recorded.get("alpha", 1.0)
    records, meta = geomviz.export_geometry(params, split, cfg["n"], seed=cfg["seed"], alpha=alpha)
    extra = {"checkpoint": _file_digest(Path(cfg["checkpoint"]).with_suffix(".bin")), "dataDigest": _data_digest(cfg["data"])}
    fp = fingerprint(cfg, extra)
    out = _outdir(cfg)
    stem = f"analyze-{fp}"
    _write_echo(out, stem, cfg)
    json_path = out / f"{stem}.geometry.json"
    geomviz.write_geometry(records, meta, json_path, out / f"{stem}.geometry.csv")
    pos, neg = geomviz.area_split(records)
    print(f"mean raw area: positive {pos.mean():.4f}, swapped negative {neg.mean():.4f}")
    print("explained variance ratio: " + ", ".join(f"{r:.3f}" for r in meta["explainedVarianceRatio"]))
    print(f"geometry {json_path}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    if cfg["trials"] < 0:
        raise ConfigError("--trials must be >= 0")
    if cfg["trials"] == 0:
        warnings.warn("gradcheck with 0 trials checks nothing", stacklevel=1)
        print("no trials requested: vacuous pass")
        return EXIT_OK
    rows = gradcheck.run(cfg["module"], cfg["trials"], cfg["seed"])
    print(gradcheck.format_table(rows))
    failed = [r for r in rows if not r.passed]
    if failed:
        for r in failed:
            print(f"FAIL {r.module}/{r.check} trial {r.trial}: max rel err {r.max_rel_error:.3e}", file=sys.stderr)
        return 1
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, datagen.CapacityError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, trainer.NumericAbort, FloatingPointError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, datagen.DatasetFormatError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
