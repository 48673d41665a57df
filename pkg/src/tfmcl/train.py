"""Pre-training, fine-tuning, Adam and classification metrics."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from tfmcl.augment import AugPolicy, make_view_pairs, stack_views
from tfmcl.data import Dataset, make_batches
from tfmcl.errors import InvalidArgumentError, NumericError
from tfmcl.loss import LossWeights, combine, component_losses, mcl
from tfmcl.model import TFMCL, EncoderConfig, grad, init_params
from tfmcl.signal import normalize_psd, normalize_time, psd_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugPolicy = field(default_factory=AugPolicy)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    batch_size: int = 128
    epochs_pretrain: int = 100
    epochs_finetune: int = 200
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    enable_frl: bool = True
    enable_tfdl: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if self.epochs_pretrain < 1 or self.epochs_finetune < 1:
            raise InvalidArgumentError("epoch counts must be >= 1")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch_size must be >= 2")

    @property
    def effective_weights(self) -> LossWeights:
        """Loss weights after the ablation toggles: no FRL means alpha=1, no TFDL means beta=0."""
        w = self.loss
        if not self.enable_frl:
            w = replace(w, alpha=1.0)
        if not self.enable_tfdl:
            w = replace(w, beta=0.0)
        return w


# -- optimizer


def adam_init(params: Dict[str, torch.Tensor]):
    return {"m": {k: torch.zeros_like(v) for k, v in params.items()},
            "v": {k: torch.zeros_like(v) for k, v in params.items()}}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """One bias-corrected Adam update; returns new (params, state) without mutating inputs."""
    if t < 1:
        raise InvalidArgumentError("Adam step counter t must be >= 1")
    if set(params) != set(grads):
        raise InvalidArgumentError("params and grads have different names")
    new_p, new_m, new_v = {}, {}, {}
    bc1, bc2 = 1 - beta1**t, 1 - beta2**t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise InvalidArgumentError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {k}")
        m = beta1 * state["m"][k] + (1 - beta1) * g
        v = beta2 * state["v"][k] + (1 - beta2) * g * g
        new_p[k] = p - lr * (m / bc1) / (torch.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, {"m": new_m, "v": new_v}


class _Adam:
    def __init__(self, model: TFMCL, cfg: TrainConfig):
        self.model, self.cfg, self.t = model, cfg, 0
        self.state = adam_init({k: p.detach() for k, p in model.named_parameters()})

    def step(self, grads):
        self.t += 1
        params = {k: p.detach() for k, p in self.model.named_parameters()}
        new, self.state = adam_step(params, grads, self.state, self.cfg.learning_rate,
                                    self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps, self.t)
        with torch.no_grad():
            for k, p in self.model.named_parameters():
                p.copy_(new[k])


# -- pre-training


def _as_tensor(x):
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def batch_losses(model: TFMCL, pairs, weights: LossWeights):
    """Component losses (float64) and their weighted total for a list of ViewPairs."""
    t, t_aug, f, f_aug = (_as_tensor(a) for a in stack_views(pairs))
    reprs = model.represent(t, t_aug, f, f_aug)
    reprs = type(reprs)(*(r.double() for r in vars(reprs).values()))
    parts = component_losses(reprs, weights)
    return parts, combine(*parts, weights.alpha, weights.beta)


def pretrain(ds: Dataset, cfg: TrainConfig, model: Optional[TFMCL] = None, progress=None):
    """Self-supervised pre-training on (possibly unlabeled) windows.

    Returns the trained model and a list of per-batch records
    ``{epoch, batch, l_t, l_f, l_z, l_tf, total}``.
    """
    enc = cfg.encoder.resolved(ds.n_channels, ds.window_len)
    if model is None:
        model = init_params(enc, cfg.seed)
    weights = cfg.effective_weights
    opt = _Adam(model, cfg)
    records = []
    for epoch in range(cfg.epochs_pretrain):
        for b, idx in enumerate(make_batches(len(ds), cfg.batch_size, cfg.seed, epoch, drop_last=False)):
            pairs = make_view_pairs([ds[i] for i in idx], cfg.augment, cfg.seed, epoch, b)
            parts, total = batch_losses(model, pairs, weights)
            for name, v in zip(("l_t", "l_f", "l_z", "l_tf"), parts):
                if not torch.isfinite(v):
                    raise NumericError(f"epoch {epoch} batch {b}: {name} is non-finite")
            opt.step(grad(lambda _m: total, model))
            rec = {"epoch": epoch, "batch": b, **mcl(*parts, weights).as_dict()}
            records.append(rec)
        if progress is not None:
            progress(epoch, [r for r in records if r["epoch"] == epoch])
    return model, records


def epoch_means(records) -> Dict[int, float]:
    out: Dict[int, List[float]] = {}
    for r in records:
        out.setdefault(r["epoch"], []).append(r["total"])
    return {k: float(np.mean(v)) for k, v in out.items()}


# -- fine-tuning and evaluation


def original_views(ds: Dataset):
    t = np.stack([normalize_time(w.samples) for w in ds.windows])
    f = np.stack([normalize_psd(psd_matrix(w.samples)) for w in ds.windows])
    return _as_tensor(t), _as_tensor(f)


@dataclass
class Metrics:
    accuracy: float
    f1: float
    confusion_counts: List[List[int]]  # rows: true HC/MDD, columns: predicted HC/MDD
    confusion_row_norm: List[List[float]]

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "confusion_counts": self.confusion_counts,
            "confusion_row_pct": [[100.0 * v for v in row] for row in self.confusion_row_norm],
        }


def metrics_from_predictions(y_true, y_pred) -> Metrics:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.size == 0:
        raise InvalidArgumentError("cannot evaluate an empty set")
    if y_true.shape != y_pred.shape:
        raise InvalidArgumentError("label and prediction counts differ")
    cm = np.zeros((2, 2), dtype=int)
    np.add.at(cm, (y_true, y_pred), 1)
    tp, fp, fn = cm[1, 1], cm[0, 1], cm[1, 0]
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros((2, 2)), where=rows > 0)
    return Metrics(float(np.trace(cm) / cm.sum()), float(f1), cm.tolist(), norm.tolist())


@torch.no_grad()
def predict(model: TFMCL, ds: Dataset, views=None) -> np.ndarray:
    t, f = original_views(ds) if views is None else views
    model.eval()
    return model(t, f).argmax(dim=1).numpy()


def evaluate(model: TFMCL, ds: Dataset, views=None) -> Metrics:
    ds.require_labels()
    return metrics_from_predictions(ds.labels, predict(model, ds, views))


def finetune(model: TFMCL, train_ds: Dataset, cfg: TrainConfig, val_ds: Optional[Dataset] = None,
             progress=None):
    """Supervised cross-entropy on original views, updating every parameter.

    Model selection keeps the epoch with the best validation accuracy (the
    training set stands in when ``val_ds`` is None). Returns (best_model, log).
    """
    train_ds.require_labels()
    sel_ds = train_ds if val_ds is None else val_ds
    sel_ds.require_labels()
    cfg.encoder.resolved(train_ds.n_channels, train_ds.window_len)
    model = copy.deepcopy(model)
    t_all, f_all = original_views(train_ds)
    sel_views = (t_all, f_all) if val_ds is None else original_views(sel_ds)
    y_all = torch.as_tensor(train_ds.labels, dtype=torch.long)
    opt = _Adam(model, cfg)
    best_acc, best_state, history = -1.0, None, []
    for epoch in range(cfg.epochs_finetune):
        model.train()
        losses = []
        for idx in make_batches(len(train_ds), cfg.batch_size, cfg.seed, epoch, drop_last=False):
            idx = torch.as_tensor(idx)
            t, f, y = t_all[idx], f_all[idx], y_all[idx]
            captured = {}

            def loss_fn(m):
                captured["loss"] = F.cross_entropy(m(t, f).double(), y)
                return captured["loss"]

            opt.step(grad(loss_fn, model))
            losses.append(float(captured["loss"].detach()))
        metrics = evaluate(model, sel_ds, sel_views)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_accuracy": metrics.accuracy, "val_f1": metrics.f1}
        history.append(rec)
        if progress is not None:
            progress(rec)
        if metrics.accuracy > best_acc:
            best_acc = metrics.accuracy
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return model, history


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
