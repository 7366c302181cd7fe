"""Losses, the training loop, dataset evaluation and the S x K grid search."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .datagen import Dataset, LabeledExample
from .exceptions import DivergenceError, InvalidInputError, ModedecError
from .model import Model, ModelConfig
from .signal import MetricReport, metrics, total_variation

logger = logging.getLogger(__name__)

METRIC_NAMES = ("mae", "rmse", "mape", "tv")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe.

    ``eta_qtv`` weights the quadratic-TV smoothness penalty; the default of
    zero trains on the plain Frobenius loss.
    """

    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    early_stop_patience: int = 20
    seed: int = 0
    eta_qtv: float = 0.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "early_stop_patience"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {v}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise InvalidInputError(f"lr must be positive, got {self.lr}")
        if not (self.eta_qtv >= 0 and math.isfinite(self.eta_qtv)):
            raise InvalidInputError(f"eta_qtv must be >= 0, got {self.eta_qtv}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_metrics: list = field(default_factory=list)  # dicts of aggregate metrics
    best_epoch: int = -1
    start_epoch: int = 0

    @property
    def n_epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - self.start_epoch] if self.best_epoch >= 0 else math.inf

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", *("val_" + m for m in METRIC_NAMES), "best"])
            for i, (tl, vl, vm) in enumerate(zip(self.train_loss, self.val_loss, self.val_metrics)):
                epoch = self.start_epoch + i
                w.writerow([epoch, repr(tl), repr(vl), *(repr(vm[m]) for m in METRIC_NAMES),
                            int(epoch == self.best_epoch)])


# -- losses ------------------------------------------------------------------

def _check_pair(pred, label):
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    label = np.atleast_2d(np.asarray(label, dtype=float))
    if pred.shape != label.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} differs from label shape {label.shape}")
    return pred, label


def frobenius_loss(pred, label) -> float:
    """Squared Frobenius distance between component stacks.

    3-D inputs ``(batch, M, N)`` give the mean over the batch.
    """
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} differs from label shape {label.shape}")
    if pred.ndim == 3:
        return float(np.mean(np.sum((pred - label) ** 2, axis=(1, 2))))
    pred, label = _check_pair(pred, label)
    return float(np.sum((pred - label) ** 2))


def qtv_penalty(pred) -> float:
    """Sum over components and time of squared first differences."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    if pred.shape[1] < 2:
        raise InvalidInputError("qtv_penalty needs components of length >= 2")
    return float(np.sum(np.diff(pred, axis=1) ** 2))


def example_loss(comps, labels, eta_qtv: float = 0.0) -> nn.Var:
    """Tape version of ``frobenius_loss + eta_qtv * qtv_penalty`` for one example."""
    labels = np.atleast_2d(labels)
    if len(comps) != labels.shape[0]:
        raise InvalidInputError(f"model emits {len(comps)} components, labels have {labels.shape[0]}")
    loss = None
    for c, y in zip(comps, labels):
        term = nn.squared_error(c, y)
        if eta_qtv:
            term = term + nn.squared_diff_sum(c) * eta_qtv
        loss = term if loss is None else loss + term
    return loss


# -- evaluation --------------------------------------------------------------

def _mean_report(reports) -> dict:
    out = {}
    for m in METRIC_NAMES:
        vals = np.array([getattr(r, m) for r in reports], dtype=float)
        vals = vals[~np.isnan(vals)]
        out[m] = float(vals.mean()) if vals.size else math.nan
    return out


@dataclass
class EvalReport:
    """Per-example per-component metrics plus two labelled aggregates.

    ``component_mean`` averages each metric over components and then over
    examples. ``component_pooled`` pools the components of an example (MAE,
    RMSE and MAPE over all of its samples, TV summed over components) and
    then averages over examples.
    """

    per_example: list  # list[list[MetricReport]]
    per_component: list  # list[dict], mean over examples for component m
    component_mean: dict
    component_pooled: dict
    loss: float

    @property
    def n_examples(self) -> int:
        return len(self.per_example)

    def table(self) -> list[dict]:
        rows = [{"scope": f"imf{m + 1}", **d} for m, d in enumerate(self.per_component)]
        rows.append({"scope": "aggregate:component_mean", **self.component_mean})
        rows.append({"scope": "aggregate:component_pooled", **self.component_pooled})
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scope", *METRIC_NAMES])
            for row in self.table():
                w.writerow([row["scope"], *(repr(row[m]) for m in METRIC_NAMES)])


def _pooled(pred: np.ndarray, label: np.ndarray) -> MetricReport:
    flat = metrics(pred.ravel(), label.ravel())
    tv = float(sum(total_variation(p) for p in pred))
    return MetricReport(flat.mae, flat.rmse, flat.mape, tv, flat.mape_excluded_count)


def evaluate_predictions(preds, labels) -> EvalReport:
    """Score ``preds`` against ``labels``, both sequences of ``(M, N)`` arrays."""
    per_example, pooled, loss = [], [], 0.0
    if len(preds) != len(labels) or not len(preds):
        raise InvalidInputError("need equally many (and at least one) predictions and labels")
    M = None
    for p, y in zip(preds, labels):
        p, y = _check_pair(p, y)
        if M is None:
            M = p.shape[0]
        elif p.shape[0] != M:
            raise InvalidInputError("component count varies across examples")
        per_example.append([metrics(pm, ym) for pm, ym in zip(p, y)])
        pooled.append(_pooled(p, y))
        loss += frobenius_loss(p, y)
    per_component = [_mean_report([r[m] for r in per_example]) for m in range(M)]
    comp_mean = _mean_report([MetricReport(**_mean_report(r)) for r in per_example])
    return EvalReport(per_example, per_component, comp_mean, _mean_report(pooled), loss / len(preds))


def predict_components(model: Model, examples) -> list[np.ndarray]:
    return [model.decompose(e.feature.values).components for e in examples]


def evaluate_dataset(model: Model, data) -> EvalReport:
    """Evaluate on a Dataset (its validation part when split) or a list of examples."""
    if isinstance(data, Dataset):
        examples = data.val if data.has_split else data.examples
    elif isinstance(data, LabeledExample):
        examples = [data]
    else:
        examples = list(data)
    for e in examples:
        if e.n_components != model.config.M:
            raise InvalidInputError(
                f"labels have {e.n_components} components, model emits {model.config.M}")
    return evaluate_predictions(predict_components(model, examples), [e.labels for e in examples])


# -- training ----------------------------------------------------------------

def _batch_grad(model: Model, batch, eta_qtv: float) -> float:
    """Accumulate the batch-mean gradient into the parameters; return the mean loss."""
    model.zero_grad()
    total = 0.0
    params = model.params()
    acc = [np.zeros_like(p.value) for p in params]
    for ex in batch:
        comps, _ = model.forward(ex.feature.values, training=True)
        loss = example_loss(comps, ex.labels, eta_qtv)
        nn.backward(loss)
        total += float(loss.value)
        for a, p in zip(acc, params):
            a += p.grad
            p.zero_grad()
    for a, p in zip(acc, params):
        p.grad[...] = a / len(batch)
    return total / len(batch)


def train(model: Model, dataset: Dataset, cfg: TrainConfig | None = None, *,
          resume_state: dict | None = None, callback=None):
    """Fit ``model`` with Adam on mini-batches of the training split.

    Stops after ``cfg.epochs`` epochs or when validation loss has not
    improved for ``cfg.early_stop_patience`` epochs, then restores the
    weights of the best validation epoch.

    Parameters
    ----------
    resume_state : dict, optional
        State returned in ``history``-bearing checkpoints by
        :func:`training_state`; epoch numbering continues from it.
    callback : callable, optional
        Called as ``callback(epoch, history)`` after every epoch.

    Returns
    -------
    model : Model
        The same object, holding the best-validation weights.
    history : History

    Raises
    ------
    DivergenceError
        On a non-finite loss, naming the epoch and batch.
    """
    cfg = cfg or TrainConfig()
    if not dataset.has_split or len(dataset.val_idx) == 0:
        raise InvalidInputError("training needs a dataset with a train/validation split")
    if dataset.n_components != model.config.M:
        raise InvalidInputError(
            f"labels have {dataset.n_components} components, model has M={model.config.M}")
    train_set, val_set = dataset.train, dataset.val
    opt = nn.Adam(model.params(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = History()
    best_values = model.get_values()
    stale = 0
    start = 0
    if resume_state is not None:
        opt.load_state_dict(resume_state["optimizer"])
        rng.bit_generator.state = resume_state["rng"]
        history = History(**resume_state["history"])
        start = history.start_epoch + history.n_epochs
        best_values = [np.array(v) for v in resume_state["best_values"]]
        stale = resume_state["stale"]
        model.set_values([np.array(v) for v in resume_state["last_values"]])

    for epoch in range(start, start + cfg.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
            try:
                loss = _batch_grad(model, batch, cfg.eta_qtv)
            except ArithmeticError as exc:  # e.g. the denoiser's solver meeting NaNs
                raise DivergenceError(f"numeric failure at epoch {epoch}, batch {b}: {exc}") from exc
            if not math.isfinite(loss) or not all(np.all(np.isfinite(p.grad)) for p in model.params()):
                raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            opt.step()
            losses.append(loss * len(batch))
        report = evaluate_dataset(model, val_set)
        if not math.isfinite(report.loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(float(sum(losses) / len(train_set)))
        history.val_loss.append(report.loss)
        history.val_metrics.append(report.component_mean)
        if report.loss < history.best_val_loss:
            history.best_epoch = epoch
            best_values = model.get_values()
            stale = 0
        else:
            stale += 1
        logger.info("epoch %d train %.6g val %.6g mae %.4g", epoch, history.train_loss[-1],
                    report.loss, report.component_mean["mae"])
        if callback is not None:
            callback(epoch, history)
        if stale >= cfg.early_stop_patience:
            break
    last_values = model.get_values()
    model.set_values(best_values)
    model.training_state = {
        "last_values": [v.tolist() for v in last_values],
        "optimizer": opt.state_dict(), "rng": rng.bit_generator.state,
        "history": history.to_dict(), "stale": stale,
        "best_values": [v.tolist() for v in best_values],
    }
    return model, history


# -- grid search -------------------------------------------------------------

@dataclass
class GridReport:
    S_values: list
    K_values: list
    cells: dict  # (S, K) -> metric dict, or {"error": str}
    row_means: dict  # S -> metric dict
    col_means: dict  # K -> metric dict
    grand_mean: dict

    @property
    def errors(self) -> dict:
        return {k: v["error"] for k, v in self.cells.items() if "error" in v}

    def write_csv(self, path) -> None:
        """Cells laid out as S rows by K columns, one block per metric, marginals in the last row/column."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for m in METRIC_NAMES:
                w.writerow([m, *(f"K={k}" for k in self.K_values), "mean"])
                for s in self.S_values:
                    row = [_fmt_cell(self.cells[(s, k)], m) for k in self.K_values]
                    w.writerow([f"S={s}", *row, repr(self.row_means[s][m])])
                w.writerow(["mean", *(repr(self.col_means[k][m]) for k in self.K_values),
                            repr(self.grand_mean[m])])


def _fmt_cell(cell, m):
    return "error" if "error" in cell else repr(cell[m])


def _nanmean(dicts) -> dict:
    ok = [d for d in dicts if "error" not in d]
    return {m: (float(np.mean([d[m] for d in ok])) if ok else math.nan) for m in METRIC_NAMES}


def marginal_means(cells: dict, S_values, K_values):
    rows = {s: _nanmean([cells[(s, k)] for k in K_values]) for s in S_values}
    cols = {k: _nanmean([cells[(s, k)] for s in S_values]) for k in K_values}
    grand = _nanmean(list(cells.values()))
    return rows, cols, grand


def grid_search(dataset: Dataset, S_values=(3, 4, 5, 6), K_values=(16, 32, 48, 64),
                cfg: TrainConfig | None = None, base: ModelConfig | None = None,
                model_seed: int = 0) -> GridReport:
    """Train one model per ``(S, K)`` and report validation metrics.

    A failing cell records its error message and is left out of the
    marginal means; the rest of the grid still runs.
    """
    base = base or ModelConfig(M=dataset.n_components)
    S_values, K_values = list(S_values), list(K_values)
    cells = {}
    for s in S_values:
        for k in K_values:
            try:
                model = Model(replace(base, S=s, K=k), seed=model_seed)
                model, _ = train(model, dataset, cfg)
                cells[(s, k)] = evaluate_dataset(model, dataset).component_mean
            except (ModedecError, ValueError, ArithmeticError) as exc:
                logger.warning("grid cell S=%s K=%s failed: %s", s, k, exc)
                cells[(s, k)] = {"error": f"{type(exc).__name__}: {exc}"}
    rows, cols, grand = marginal_means(cells, S_values, K_values)
    return GridReport(S_values, K_values, cells, rows, cols, grand)
