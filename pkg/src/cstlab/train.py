"""Training loop, semi-supervised batching, evaluation and attention export."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .constraints import ConstraintWeights, attention_mass, loss_terms
from .errors import ConfigError, UsageError
from .model import ModelConfig, forward, init_model, predict, save_checkpoint
from .tasks import task_for

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 6e-4
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    T_train: int = None
    T_eval: int = None
    weights: ConstraintWeights = field(default_factory=ConstraintWeights)
    loss_placement: str = None
    unlabeled_ratio: tuple = None  # (labeled, unlabeled) per batch
    eval_every: int = 1
    eval_batch_size: int = 250

    def __post_init__(self):
        if self.T_train is None:
            self.T_train = self.model.R
        if self.T_eval is None:
            self.T_eval = 2 * self.T_train
        if self.loss_placement is None:
            self.loss_placement = self.model.loss_placement
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.T_train < 1 or self.T_eval < 1:
            raise ConfigError("recurrence counts must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["weights"] = {"alpha": self.weights.alpha, "beta": self.weights.beta}
        return d


class TrainingError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# batching


def split_counts(batch_size, ratio):
    """Labeled/unlabeled counts per batch for a ``(labeled, unlabeled)`` ratio.

    The batch size is adjusted to the nearest multiple of the ratio's sum so
    both counts are integers.
    """
    a, b = (int(x) for x in ratio)
    if a < 1 or b < 0:
        raise ConfigError(f"invalid labeled:unlabeled ratio {ratio}")
    unit = max(1, int(math.floor(batch_size / (a + b) + 0.5)))
    return a * unit, b * unit


def semi_supervised_batch(labeled, unlabeled, batch_size, ratio, rng):
    """Draw one batch with fixed labeled and unlabeled counts."""
    if not labeled:
        raise ConfigError("the labeled pool is empty")
    n_lab, n_unl = split_counts(batch_size, ratio)
    if not unlabeled:
        n_unl = 0
    pick_l = rng.choice(len(labeled), n_lab, replace=n_lab > len(labeled))
    pick_u = rng.choice(len(unlabeled), n_unl, replace=n_unl > len(unlabeled)) if n_unl else []
    return [labeled[i] for i in pick_l] + [unlabeled[i] for i in pick_u]


def epoch_batches(instances, config, rng):
    """Batches for one epoch.

    Without a mixing ratio the pool is shuffled and cut into consecutive
    batches. With one, an epoch is one pass over the labeled pool and each
    batch is topped up with unlabeled instances drawn in shuffled order.
    """
    if config.unlabeled_ratio is None:
        order = rng.permutation(len(instances))
        bs = config.batch_size
        return [[instances[i] for i in order[s:s + bs]] for s in range(0, len(order), bs)]
    labeled = [x for x in instances if x.labeled]
    unlabeled = [x for x in instances if not x.labeled]
    if not labeled:
        raise ConfigError("the labeled pool is empty")
    n_lab, n_unl = split_counts(config.batch_size, config.unlabeled_ratio)
    if not unlabeled:
        n_unl = 0
    lab_order = rng.permutation(len(labeled))
    unl_order = rng.permutation(len(unlabeled)) if unlabeled else []
    batches, u = [], 0
    for s in range(0, len(labeled), n_lab):
        batch = [labeled[i] for i in lab_order[s:s + n_lab]]
        for _ in range(n_unl):
            if u == len(unl_order):
                unl_order, u = rng.permutation(len(unlabeled)), 0
            batch.append(unlabeled[unl_order[u]])
            u += 1
        batches.append(batch)
    return batches


# ---------------------------------------------------------------------------
# loss and evaluation


def batch_loss(model, task, batch, config, train_mode=True, rng=None, T_steps=None):
    tokens, labels = task.batch(batch)
    trace = forward(model, tokens, T_steps or config.T_train, train_mode=train_mode, rng=rng)
    return loss_terms(trace, labels, config.weights, config.loss_placement,
                      task.output_loss(batch), task.adjacency)


def evaluate(model, instances, T_eval, task=None, batch_size=250):
    """Metrics of ``predict(model, ., T_eval)`` against the instance labels."""
    if not instances:
        raise UsageError("nothing to evaluate")
    task = task or task_for(instances)
    preds = []
    for s in range(0, len(instances), batch_size):
        tokens, _ = task.batch(instances[s:s + batch_size])
        preds.append(predict(model, tokens, T_eval))
    return task.metrics(np.concatenate(preds), instances)


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int = None
    best_whole_board: float = None


def train_loop(config, split, task=None, out_dir=None, on_epoch=None):
    """Train from scratch on ``split.train``; evaluate on ``split.test``.

    One step is a forward pass with ``T_train`` recurrences in train mode,
    the total loss, backward and one Adam update. With ``out_dir`` the
    per-epoch metric log and the ``last``/``best`` checkpoints are written.
    ``on_epoch(record, model)`` may return True to stop early.
    """
    task = task or task_for(split.train)
    dims = task.model_dims()
    for key, value in dims.items():
        if getattr(config.model, key) != value:
            raise ConfigError(f"model {key}={getattr(config.model, key)} but task needs {value}")
    model = init_model(config.model, config.seed)
    data_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    params = model.parameters()
    state = T.AdamState(lr=config.lr)
    eval_set = split.test or split.train
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text("")

    history, best, best_epoch = [], -1.0, None
    for epoch in range(1, config.epochs + 1):
        sum_base = sum_con = 0.0
        batches = epoch_batches(split.train, config, data_rng)
        for step, batch in enumerate(batches):
            with T.Tape() as tape:
                terms = batch_loss(model, task, batch, config, True, drop_rng)
            total = terms.total.item()
            if not math.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {step}: "
                    f"base={terms.base.item()}, constraint={terms.constraint.item()}"
                )
            model.zero_grad()
            tape.backward(terms.total)
            T.adam_step(params, [p.grad for p in params], state)
            sum_base += terms.base.item()
            sum_con += terms.constraint.item()
        record = {"epoch": epoch, "loss_base": sum_base / len(batches),
                  "loss_constraint": sum_con / len(batches)}
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            record["metrics"] = evaluate(model, eval_set, config.T_eval, task, config.eval_batch_size)
            acc = record["metrics"]["whole_board_acc"]
            if acc is not None and acc > best:
                best, best_epoch = acc, epoch
                if out_dir:
                    save_checkpoint(model, out_dir / "best", {"epoch": epoch})
        history.append(record)
        log.info("epoch %d %s", epoch, json.dumps(record))
        if out_dir:
            with open(out_dir / "metrics.jsonl", "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            save_checkpoint(model, out_dir / "last", {"epoch": epoch})
        if on_epoch is not None and on_epoch(record, model):
            break
    return TrainResult(model, history, best_epoch, best if best_epoch else None)


# ---------------------------------------------------------------------------
# attention export


def export_attention(model, instance, r, l, path, adjacency=None):
    """Write the per-head attention at recurrence ``r``, block ``l`` as CSV.

    Files are ``attn_r{r}_l{l}_h{h}.csv`` (one per head); with an adjacency
    matrix (the task's by default) the per-position adjacent attention mass
    goes to ``adjacency_mass_r{r}_l{l}.csv``.
    """
    cfg = model.config
    if not 1 <= l <= cfg.L:
        raise UsageError(f"block {l} outside 1..{cfg.L}")
    if r < 1:
        raise UsageError(f"recurrence {r} must be >= 1")
    if adjacency is None:
        adjacency = task_for([instance]).adjacency
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    trace = forward(model, instance.tokens, r, train_mode=False)
    A = trace.at(r, l).A
    files = []
    for h in range(cfg.H):
        f = out / f"attn_r{r}_l{l}_h{h + 1}.csv"
        np.savetxt(f, A.data[0, h], delimiter=",", fmt="%.8g")
        files.append(f)
    if adjacency is not None:
        mass = attention_mass(A, adjacency).data[0]  # (H, t)
        f = out / f"adjacency_mass_r{r}_l{l}.csv"
        np.savetxt(f, mass, delimiter=",", fmt="%.8g")
        files.append(f)
    return files
