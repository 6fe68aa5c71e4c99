"""Command-line harness: ``eroseg <command> [options]``.

Every command resolves a flat key=value configuration (defaults, then the
file given by ``--config``, then explicit flags; last wins) and writes the
resolved snapshot to ``<out>/config.txt``. Rerunning with
``--config <out>/config.txt --out <other>`` reproduces the outputs byte for
byte.

Exit status: 0 success, 1 internal failure, 2 usage or validation error.
"""

import argparse
import os
import sys
from fractions import Fraction

from . import data as datamod
from . import gradsuite
from . import metrics
from . import numerics as nx
from . import sgt
from .attacks import AttackConfig
from .errors import FormatError, ValidationError
from .model import load_checkpoint, predict_labels, save_checkpoint
from .training import (TrainConfig, adv_train, clean_confusion, evaluate_under_attack,
                       train_clean, write_metrics_csv)

SNAPSHOT = "config.txt"


class UsageError(Exception):
    pass


def parse_float(text):
    """Decimal or ``a/b`` fraction, correctly rounded."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ValidationError(f"not a number: {text!r}") from None


def parse_int(text):
    try:
        return int(text.strip())
    except ValueError:
        raise ValidationError(f"not an integer: {text!r}") from None


def _fmt(value):
    return repr(value) if isinstance(value, float) else str(value)


# key -> (parser, default); None default means required
ATTACK_KEYS = {
    "attack": (str, "eroseg"),
    "iters": (parse_int, 10),
    "epsilon": (parse_float, 8 / 255),
    "alpha": (parse_float, 0.001),
    "tau0": (parse_float, 0.8),
    "beta": (parse_float, 0.8),
    "lambda_fg": (parse_float, 0.7),
    "init": (str, "uniform"),
    "mask_mode": (str, "eroseg"),
    "seed": (parse_int, 0),
    "batch_size": (parse_int, 64),
}
TRAIN_KEYS = {
    "data": (str, None),
    "epochs": (parse_int, 30),
    "batch_size": (parse_int, 16),
    "lr": (parse_float, 0.1),
    "seed": (parse_int, 0),
}
ADV_KEYS = dict(TRAIN_KEYS, **{
    "lambda_balance": (parse_float, 1.0),
    "attack": (str, "eroseg"),
    "iters": (parse_int, 3),
    "epsilon": (parse_float, 8 / 255),
    "alpha": (parse_float, 2 / 255),
    "tau0": (parse_float, 0.8),
    "beta": (parse_float, 0.8),
    "lambda_fg": (parse_float, 0.7),
    "init": (str, "uniform"),
    "mask_mode": (str, "eroseg"),
    "attack_seed": (parse_int, 0),
})
EVAL_KEYS = dict(ATTACK_KEYS, checkpoint=(str, None), data=(str, None))
SWEEP_AXES = {"tau": "tau0", "beta": "beta", "lambda": "lambda_fg", "iters": "iters"}
COMMAND_KEYS = {
    "gen-data": {
        "seed": (parse_int, 0), "n": (parse_int, 256), "hw": (parse_int, 32),
        "classes": (parse_int, datamod.NUM_CLASSES), "split": (str, "train"),
    },
    "train": TRAIN_KEYS,
    "adv-train": ADV_KEYS,
    "attack": EVAL_KEYS,
    "eval": EVAL_KEYS,
    "sweep": dict(EVAL_KEYS, axis=(str, None), values=(str, None)),
}


def read_config(path):
    entries = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    for number, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{number}: expected key=value, got {line!r}")
        entries[key.strip().replace("-", "_")] = value.strip()
    return entries


def resolve(command, args):
    """Defaults < config file < flags, parsed to typed values."""
    spec = COMMAND_KEYS[command]
    raw = {}
    if getattr(args, "config", None):
        raw.update(read_config(args.config))
    raw.pop("command", None)
    unknown = sorted(set(raw) - set(spec))
    if unknown:
        raise ValidationError(f"unknown config keys for {command}: {', '.join(unknown)}")
    for key in spec:
        flag = getattr(args, key, None)
        if flag is not None:
            raw[key] = flag
    cfg = {}
    for key, (parse, default) in spec.items():
        if key in raw:
            cfg[key] = parse(str(raw[key]))
        elif default is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
        else:
            cfg[key] = default
    return cfg


def write_snapshot(out, command, cfg):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, SNAPSHOT), "w", newline="\n") as fh:
        fh.write(f"command={command}\n")
        fh.writelines(f"{k}={_fmt(v)}\n" for k, v in sorted(cfg.items()))


def attack_config(cfg, **override):
    keys = ("epsilon", "alpha", "iters", "tau0", "beta", "lambda_fg", "init", "mask_mode", "seed")
    values = {k: cfg[k] for k in keys}
    values.update(override)
    return AttackConfig(**values).validate()


def write_lines(path, lines):
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---- commands --------------------------------------------------------------

def cmd_gen_data(cfg, out):
    ds = datamod.generate(cfg["seed"], cfg["n"], cfg["hw"], cfg["hw"],
                          num_classes=cfg["classes"], split=cfg["split"])
    write_snapshot(out, "gen-data", cfg)
    datamod.save(ds, out)
    print(f"wrote {len(ds)} images of {cfg['hw']}x{cfg['hw']} to {out}")


def _train_config(cfg, adversarial):
    extra = {}
    if adversarial:
        extra = dict(
            lambda_balance=cfg["lambda_balance"], attack=cfg["attack"],
            inner=attack_config(cfg, seed=cfg["attack_seed"], iters=cfg["iters"]),
        )
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       seed=cfg["seed"], **extra).validate()


def cmd_train(cfg, out, adversarial=False):
    tc = _train_config(cfg, adversarial)
    ds = datamod.load_dir(cfg["data"])
    write_snapshot(out, "adv-train" if adversarial else "train", cfg)
    model, history = (adv_train if adversarial else train_clean)(ds, tc)
    save_checkpoint(model, os.path.join(out, "checkpoint.sgm"))
    write_metrics_csv(history, os.path.join(out, "metrics.csv"))
    last = history[-1] if history else None
    if last is not None:
        print(f"epoch {last.epoch}: clean_loss={last.clean_loss:.4f} train_miou={last.clean_miou:.4f}")


def _load_eval_inputs(cfg):
    model = load_checkpoint(cfg["checkpoint"])
    ds = datamod.load_dir(cfg["data"])
    return model, ds


def cmd_eval(cfg, out):
    acfg = attack_config(cfg)
    model, ds = _load_eval_inputs(cfg)
    write_snapshot(out, "eval", cfg)
    clean_cm = clean_confusion(model, ds, cfg["batch_size"])
    robust, trace, adv = evaluate_under_attack(model, ds, acfg, attack=cfg["attack"],
                                               batch_size=cfg["batch_size"], keep_images=True)
    adv_cm = metrics.accumulate(predict_labels(model, adv), ds.labels, model.num_classes)
    trace.write_csv(os.path.join(out, "trace.csv"))
    sgt.save(os.path.join(out, "adv_images.sgt"), adv)
    write_lines(os.path.join(out, "iou_clean.csv"), metrics.iou_csv_rows(clean_cm))
    write_lines(os.path.join(out, "iou_adv.csv"), metrics.iou_csv_rows(adv_cm))
    clean = metrics.miou(clean_cm)
    write_lines(os.path.join(out, "result.csv"), [
        "metric,value", f"clean_miou,{clean!r}", f"robust_miou,{robust!r}",
    ])
    print(f"clean mIoU {clean:.4f}  robust mIoU ({cfg['attack']}, T={acfg.iters}) {robust:.4f}")


def cmd_sweep(cfg, out):
    if cfg["axis"] not in SWEEP_AXES:
        raise UsageError(f"invalid axis {cfg['axis']!r}; valid axes: {', '.join(SWEEP_AXES)}")
    key = SWEEP_AXES[cfg["axis"]]
    parse = ATTACK_KEYS[key][0]
    values = [parse(v) for v in cfg["values"].split(",") if v.strip()]
    if not values:
        raise ValidationError("--values needs at least one value")
    configs = [attack_config(cfg, **{key: v}) for v in values]
    model, ds = _load_eval_inputs(cfg)
    write_snapshot(out, "sweep", cfg)
    rows = [f"{cfg['axis']},robust_miou"]
    for v, acfg in zip(values, configs):
        robust, _ = evaluate_under_attack(model, ds, acfg, attack=cfg["attack"], batch_size=cfg["batch_size"])
        rows.append(f"{_fmt(v)},{robust!r}")
        print(f"{cfg['axis']}={_fmt(v)}: robust mIoU {robust:.4f}")
    write_lines(os.path.join(out, "sweep.csv"), rows)


def cmd_grad_check(args):
    faults = [nx.inject_fault(op) for op in (args.inject_fault or [])]
    for f in faults:
        f.__enter__()
    try:
        report = gradsuite.run(args.instances, args.seed)
    finally:
        for f in reversed(faults):
            f.__exit__(None, None, None)
    width = max(map(len, report))
    for op, err in report.items():
        status = "ok" if err < gradsuite.TOLERANCE else "FAIL"
        print(f"{op:<{width}}  max_rel_err={err:.3e}  {status}")
    return 0 if gradsuite.passed(report) else 1


# ---- argument parsing --------------------------------------------------------

def _flags(parser, keys, helps=None):
    helps = helps or {}
    for key in keys:
        parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                            help=helps.get(key))


def build_parser():
    parser = argparse.ArgumentParser(prog="eroseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    parser.commands = {}

    def add(name, keys, help):
        p = sub.add_parser(name, help=help)
        parser.commands[name] = p
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--out", required=True, help="output directory")
        _flags(p, keys)
        return p

    add("gen-data", COMMAND_KEYS["gen-data"], "generate a synthetic shapes dataset")
    add("train", TRAIN_KEYS, "clean training")
    add("adv-train", ADV_KEYS, "adversarial training with an inner attack")
    for name in ("attack", "eval"):
        add(name, EVAL_KEYS, "attack a checkpoint and report robust mIoU")
    add("sweep", COMMAND_KEYS["sweep"], "one attack evaluation per value of an axis "
        f"({', '.join(SWEEP_AXES)})")
    g = sub.add_parser("grad-check", help="finite-difference gradient suite")
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", action="append", metavar="OP",
                   choices=["conv2d", "relu", "log_softmax_channels", "pixel_cross_entropy"],
                   help="test hook: corrupt the gradient of OP")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "grad-check":
            return cmd_grad_check(args)
        cfg = resolve(args.command, args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command in ("train", "adv-train"):
            cmd_train(cfg, args.out, adversarial=args.command == "adv-train")
        elif args.command in ("attack", "eval"):
            cmd_eval(cfg, args.out)
        else:
            cmd_sweep(cfg, args.out)
        return 0
    except UsageError as exc:
        parser.commands.get(args.command, parser).print_usage(sys.stderr)
        print(f"eroseg: error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, FormatError) as exc:
        print(f"eroseg: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"eroseg: error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"eroseg: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
