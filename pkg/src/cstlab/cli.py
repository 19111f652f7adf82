"""Command-line entry point: generate, train, eval, gradcheck, oracle-check, attn-dump."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data
from . import tensor as T
from .constraints import ConstraintWeights, loss_terms
from .errors import CstlabError, ConfigError, DataError, ParseError, ResourceError, UsageError
from .model import ModelConfig, forward, init_model, load_checkpoint, parse_arch
from .tasks import task_for
from .train import TrainConfig, TrainingError, evaluate, export_attention, train_loop

log = logging.getLogger("cstlab")

TASKS = ("sudoku4", "sudoku9", "sp", "nonogram")

# key -> (type, default); the flat key = value config file accepts exactly these
CONFIG_KEYS = {
    "arch": (str, "L1R8H2"),
    "d_h": (int, 64),
    "d_mlp": (int, None),
    "lr": (float, 6e-4),
    "dropout": (float, 0.1),
    "batch_size": (int, 16),
    "epochs": (int, 100),
    "seed": (int, 0),
    "alpha": (float, 0.0),
    "beta": (float, 0.0),
    "t_train": (int, None),
    "t_eval": (int, None),
    "loss_placement": (str, "all"),
    "use_positional": (bool, True),
    "unlabeled_fraction": (float, 0.0),
    "unlabeled_ratio": (str, None),
    "eval_every": (int, 1),
}


def _convert(kind, text):
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(text)
    return kind(text)


def read_config_file(path):
    """Parse ``key = value`` lines (``#`` starts a comment) into typed values."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ParseError(f"unknown key {key!r}", lineno)
        kind = CONFIG_KEYS[key][0]
        try:
            values[key] = _convert(kind, value)
        except ValueError:
            raise ParseError(f"key {key!r}: expected {kind.__name__}, got {value!r}", lineno) from None
    return values


def resolve(file_values=None, flag_values=None):
    """Built-in defaults, overridden by the file, overridden by flags."""
    out = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    out.update(file_values or {})
    out.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    return out


def _ratio(text):
    if text is None:
        return None
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise ConfigError(f"unlabeled_ratio must look like '1:1', got {text!r}") from None
    return (a, b)


def build_train_config(values, dims):
    L, R, H = parse_arch(values["arch"])
    model = ModelConfig(
        L=L, R=R, H=H, d_h=values["d_h"], d_mlp=values["d_mlp"], dropout=values["dropout"],
        loss_placement=values["loss_placement"], use_positional=values["use_positional"], **dims,
    )
    return TrainConfig(
        model=model,
        lr=values["lr"],
        batch_size=values["batch_size"],
        epochs=values["epochs"],
        seed=values["seed"],
        T_train=values["t_train"],
        T_eval=values["t_eval"],
        weights=ConstraintWeights(values["alpha"], values["beta"]),
        loss_placement=values["loss_placement"],
        unlabeled_ratio=_ratio(values["unlabeled_ratio"]),
        eval_every=values["eval_every"],
    )


def load_config(path=None, task="sudoku4", overrides=None):
    """Resolved :class:`TrainConfig` from an optional config file and overrides."""
    file_values = read_config_file(path) if path else {}
    values = resolve(file_values, overrides)
    return build_train_config(values, task_for(task).model_dims())


# ---------------------------------------------------------------------------
# helpers


def _print_config(config):
    print("config " + json.dumps(config, sort_keys=True, default=str), flush=True)


def _guess_task(path, model=None):
    path = Path(path)
    if path.suffix == ".csv":
        if model is None:
            raise UsageError("--task is required for Sudoku files without a checkpoint")
        side = model.config.c
        return f"sudoku{side}"
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    if not first:
        raise UsageError(f"cannot infer the task of empty file {path}")
    try:
        keys = set(json.loads(first))
    except (json.JSONDecodeError, TypeError):
        raise ParseError("invalid JSON", 1) from None
    if "grid_n" in keys:
        return "sp"
    if "solution" in keys:
        return "nonogram"
    raise UsageError(f"cannot infer the task of {path}")


def _givens(text, task):
    if text is None:
        return (6, 10) if task == "sudoku4" else (31, 42)
    try:
        lo, hi = (int(x) for x in text.split("-"))
    except ValueError:
        raise ConfigError(f"--givens must look like LO-HI, got {text!r}") from None
    return lo, hi


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    seed = 0 if args.seed is None else args.seed
    cfg = {"task": args.task, "count": args.count, "test_count": args.test_count, "seed": seed,
           "out": str(args.out), "test_out": str(args.test_out) if args.test_out else None}
    if args.task.startswith("sudoku"):
        cfg["givens"] = list(_givens(args.givens, args.task))
    elif args.task == "sp":
        cfg["grid_order"] = args.grid_order or 4
    else:
        cfg["grid_order"] = args.grid_order or 7
        cfg["fill_prob"] = args.fill_prob
    _print_config(cfg)
    if args.test_count and not args.test_out:
        raise UsageError("--test-count needs --test-out")
    if args.task.startswith("sudoku"):
        n = 2 if args.task == "sudoku4" else 3
        split = data.gen_sudoku(n, args.count, tuple(cfg["givens"]), seed, args.test_count)
    elif args.task == "sp":
        split = data.gen_shortest_path(cfg["grid_order"], args.count, seed, args.test_count)
    else:
        split = data.gen_nonogram(cfg["grid_order"], args.count, seed, args.fill_prob, args.test_count)
    data.write_instances(args.out, split.train, args.task)
    if args.test_out:
        data.write_instances(args.test_out, split.test, args.task)
    log.info("wrote %d train and %d test instances", len(split.train), len(split.test))
    return 0


def _train_flags(args):
    flags = {
        "arch": args.arch, "d_h": args.dh, "lr": args.lr, "dropout": args.dropout,
        "batch_size": args.batch_size, "epochs": args.epochs, "seed": args.seed,
        "alpha": args.alpha, "beta": args.beta, "t_train": args.t_train, "t_eval": args.t_eval,
        "loss_placement": args.loss_placement, "unlabeled_fraction": args.unlabeled_fraction,
        "unlabeled_ratio": args.unlabeled_ratio, "eval_every": args.eval_every,
    }
    if args.no_positional:
        flags["use_positional"] = False
    return flags


def cmd_train(args):
    file_values = read_config_file(args.config) if args.config else {}
    values = resolve(file_values, _train_flags(args))
    _print_config(dict(values, task=args.task, data=str(args.data), out_dir=str(args.out_dir),
                       test_data=str(args.test_data) if args.test_data else None))
    train = data.load_instances(args.data, args.task)
    test = data.load_instances(args.test_data, args.task) if args.test_data else []
    if not train:
        raise DataError(f"{args.data} holds no instances")
    split = data.DatasetSplit(train, test, {"train": str(args.data)})
    if values["unlabeled_fraction"]:
        split = data.mask_labels(split, values["unlabeled_fraction"], values["seed"])
    task = task_for(train)
    config = build_train_config(values, task.model_dims())
    result = train_loop(config, split, task, out_dir=args.out_dir)
    final = result.history[-1]
    print(json.dumps({"best_epoch": result.best_epoch, "best_whole_board_acc": result.best_whole_board,
                      "final": final}, sort_keys=True))
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    task_name = args.task or _guess_task(args.data, model)
    t_eval = args.t_eval or 2 * model.config.R
    _print_config({"checkpoint": str(args.checkpoint), "data": str(args.data), "task": task_name,
                   "t_eval": t_eval})
    instances = data.load_instances(args.data, task_name)
    if not instances:
        raise DataError(f"{args.data} holds no instances")
    print(json.dumps(evaluate(model, instances, t_eval), sort_keys=True))
    return 0


def cmd_gradcheck(args):
    file_values = read_config_file(args.config) if args.config else {}
    values = {"arch": "L1R2H2", "d_h": 16, "t": 16, "seed": 0, "tol": 1e-4, "alpha": 0.0, "beta": 0.0}
    values.update({k: v for k, v in file_values.items() if k in values})
    flags = {"arch": args.arch, "d_h": args.dh, "t": args.t, "seed": args.seed, "tol": args.tol}
    values.update({k: v for k, v in flags.items() if v is not None})
    _print_config(values)
    report = gradcheck(values)
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_checked} entries")
    return 0 if report.max_rel_error < values["tol"] else 1


def gradcheck(values):
    """Finite-difference check of the full model on a random batch in float64."""
    L, R, H = parse_arch(values["arch"])
    cfg = ModelConfig(L=L, R=R, H=H, d_h=values["d_h"], t=values["t"], v=5, c=4, dropout=0.0)
    model = init_model(cfg, values["seed"], dtype=np.float64)
    rng = np.random.default_rng(values["seed"])
    for p in model.parameters():
        p.data += rng.normal(0, 0.3, size=p.shape)
    tokens = rng.integers(0, cfg.v, (2, cfg.t))
    labels = rng.integers(-1, cfg.c, (2, cfg.t))
    names = [k for k, _ in model.named_parameters()]

    def f(params):
        model.params = dict(zip(names, params))
        return loss_terms(forward(model, tokens, R), labels).total

    return T.finite_diff_check(f, model.parameters())


def cmd_oracle_check(args):
    _print_config({"task": args.task, "data": str(args.data)})
    instances = data.load_instances(args.data, args.task)
    print(f"{len(instances)} instances pass the {args.task} checker")
    return 0


def cmd_attn_dump(args):
    model = load_checkpoint(args.checkpoint)
    task_name = args.task or _guess_task(args.instance, model)
    _print_config({"checkpoint": str(args.checkpoint), "instance": str(args.instance), "index": args.index,
                   "r": args.r, "l": args.l, "out": str(args.out), "task": task_name})
    instances = data.load_instances(args.instance, task_name)
    if not 0 <= args.index < len(instances):
        raise UsageError(f"--index {args.index} outside 0..{len(instances) - 1}")
    for f in export_attention(model, instances[args.index], args.r, args.l, args.out):
        print(f)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    d = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    p.add_argument("--arch", help=f"model shape LxRyHz (default {d['arch']})")
    p.add_argument("--dh", type=int, help=f"hidden width d_h (default {d['d_h']})")
    p.add_argument("--lr", type=float, help=f"Adam learning rate (default {d['lr']})")
    p.add_argument("--dropout", type=float, help=f"dropout rate (default {d['dropout']})")
    p.add_argument("--batch-size", type=int, help=f"batch size (default {d['batch_size']})")
    p.add_argument("--epochs", type=int, help=f"training epochs (default {d['epochs']})")
    p.add_argument("--seed", type=int, help=f"random seed (default {d['seed']})")
    p.add_argument("--alpha", type=float, help=f"output constraint weight in [0,1] (default {d['alpha']})")
    p.add_argument("--beta", type=float, help=f"attention constraint weight in [0,1] (default {d['beta']})")
    p.add_argument("--t-train", type=int, help="training recurrences (default: R of --arch)")
    p.add_argument("--t-eval", type=int, help="evaluation recurrences (default: 2 x t-train)")
    p.add_argument("--loss-placement", choices=("all", "last"),
                   help=f"where the cross-entropy applies (default {d['loss_placement']})")
    p.add_argument("--no-positional", action="store_true", help="drop the positional embedding (default: keep)")
    p.add_argument("--unlabeled-fraction", type=float,
                   help=f"fraction of training labels masked (default {d['unlabeled_fraction']})")
    p.add_argument("--unlabeled-ratio", help="labeled:unlabeled per batch, e.g. 1:1 (default: none)")
    p.add_argument("--eval-every", type=int, help=f"epochs between evaluations (default {d['eval_every']})")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="cstlab", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset file", formatter_class=fmt)
    p.add_argument("--task", choices=TASKS, required=True, help="task to generate")
    p.add_argument("--count", type=int, required=True, help="number of training instances")
    p.add_argument("--test-count", type=int, default=0, help="number of disjoint test instances")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", type=Path, required=True, help="output file")
    p.add_argument("--test-out", type=Path, default=None, help="output file for the test instances")
    p.add_argument("--givens", default=None, help="Sudoku givens range LO-HI (6-10 for 4x4, 31-42 for 9x9)")
    p.add_argument("--grid-order", type=int, default=None, help="grid side (4 for sp, 7 for nonogram)")
    p.add_argument("--fill-prob", type=float, default=0.5, help="nonogram cell fill probability")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--task", choices=TASKS, required=True, help="task of the data files")
    p.add_argument("--data", type=Path, required=True, help="training data file")
    p.add_argument("--test-data", type=Path, default=None, help="held-out data file for evaluation")
    p.add_argument("--config", type=Path, default=None, help="key = value config file")
    p.add_argument("--out-dir", type=Path, required=True, help="directory for checkpoints and metrics")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--data", type=Path, required=True, help="data file")
    p.add_argument("--task", choices=TASKS, default=None, help="task of the data file (default: inferred)")
    p.add_argument("--t-eval", type=int, default=None, help="recurrences (default: 2 x R of the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check", formatter_class=fmt)
    p.add_argument("--config", type=Path, default=None, help="key = value config file (arch, d_h, seed)")
    p.add_argument("--arch", default=None, help="model shape LxRyHz (default L1R2H2)")
    p.add_argument("--dh", type=int, default=None, help="hidden width (default 16)")
    p.add_argument("--t", type=int, default=None, help="sequence length (default 16)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--tol", type=float, default=None, help="pass threshold on relative error (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-check", help="validate every label of a data file", formatter_class=fmt)
    p.add_argument("--task", choices=TASKS, required=True, help="task of the data file")
    p.add_argument("--data", type=Path, required=True, help="data file")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("attn-dump", help="export attention matrices as CSV", formatter_class=fmt)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--instance", type=Path, required=True, help="data file holding the instance")
    p.add_argument("--index", type=int, default=0, help="instance index in the file")
    p.add_argument("--task", choices=TASKS, default=None, help="task of the data file (default: inferred)")
    p.add_argument("--r", type=int, required=True, help="recurrence, 1-based")
    p.add_argument("--l", type=int, required=True, help="block, 1-based")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_attn_dump)
    return parser


def _threads():
    raw = os.environ.get("CSTLAB_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CSTLAB_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)  # 0 means single-threaded


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        threads = _threads()
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, ResourceError, TrainingError, CstlabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
