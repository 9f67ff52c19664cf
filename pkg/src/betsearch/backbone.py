"""Latent-factor backbones trained with BPR under a prefix mask.

Two scorers share one embedding table (users first, then items):

* ``mf``: inner product of masked embeddings.
* ``lightgcn``: inner product of propagated embeddings, where propagation
  averages layers ``0..L`` of repeated multiplication by the symmetric
  normalised user-item adjacency (no self loops).

Gradients are written out by hand. For LightGCN the propagation operator
is symmetric, so the gradient w.r.t. the table is the propagation applied
to the gradient w.r.t. the propagated embeddings.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .dataset import sample_bpr_batch
from .embedding import MaskedEmbeddingTable, apply_action, init_table

logger = logging.getLogger(__name__)

SCORERS = ("mf", "lightgcn")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 0.03
    decay_every: int = 200
    decay_ratio: float = 0.98
    l2_coeff: float = 1e-4
    batch_size: int = 2048
    max_epochs: int = 200
    finetune_epochs: int = 10
    patience: int = 10
    eval_every: int = 5
    init_scale: float = 0.1

    def validate(self):
        for name in ("initial_lr", "decay_every", "batch_size", "max_epochs",
                     "finetune_epochs", "patience", "eval_every", "init_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"train.{name} must be positive")
        if not 0 < self.decay_ratio <= 1:
            raise ValueError("train.decay_ratio must lie in (0, 1]")
        if self.l2_coeff < 0:
            raise ValueError("train.l2_coeff must be >= 0")

    def lr_at(self, step):
        return self.initial_lr * self.decay_ratio ** (step // self.decay_every)


def normalized_adjacency(num_users, num_items, train_pairs):
    """Symmetric normalised bipartite adjacency D^-1/2 A D^-1/2 as CSR."""
    n = num_users + num_items
    pairs = np.unique(np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2), axis=0)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1] + num_users])
    cols = np.concatenate([pairs[:, 1] + num_users, pairs[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    return (d @ adj @ d).tocsr()


def _log_sigmoid_neg(x):
    # -ln sigma(x) = ln(1 + e^-x), overflow safe
    return np.logaddexp(0.0, -x)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Backbone:
    """Recommender ``G_Theta`` whose parameters are a MaskedEmbeddingTable."""

    def __init__(self, table, num_users, num_items, scorer="mf", layers=0, adjacency=None):
        if scorer not in SCORERS:
            raise ValueError(f"unknown scorer {scorer!r}; expected one of {SCORERS}")
        if table.num_rows != num_users + num_items:
            raise ValueError("table rows must equal num_users + num_items")
        if scorer == "lightgcn" and layers > 0 and adjacency is None:
            raise ValueError("lightgcn needs the normalised adjacency")
        self.table = table
        self.num_users = num_users
        self.num_items = num_items
        self.scorer = scorer
        self.layers = int(layers) if scorer == "lightgcn" else 0
        self.adjacency = adjacency

    @classmethod
    def for_dataset(cls, ds, d_max, scorer="mf", layers=0, init_scale=0.1, seed=0):
        table = init_table(ds.num_entities, d_max, init_scale, seed)
        adj = normalized_adjacency(ds.num_users, ds.num_items, ds.train) if scorer == "lightgcn" else None
        return cls(table, ds.num_users, ds.num_items, scorer, layers, adj)

    def copy(self):
        return Backbone(self.table.copy(), self.num_users, self.num_items, self.scorer,
                        self.layers, self.adjacency)

    @property
    def d_max(self):
        return self.table.d_max

    def propagate(self, x):
        """Apply the layer-averaged propagation operator to a row matrix."""
        if self.layers == 0:
            return x
        acc = x.copy()
        cur = x
        for _ in range(self.layers):
            cur = self.adjacency @ cur
            acc += cur
        return acc / (self.layers + 1)

    def final_embeddings(self):
        out = self.propagate(self.table.masked())
        return out[:self.num_users], out[self.num_users:]

    def _check(self, u, v):
        if not 0 <= u < self.num_users:
            raise IndexError(f"user {u} out of range")
        if not 0 <= v < self.num_items:
            raise IndexError(f"item {v} out of range")

    def score(self, u, v):
        self._check(u, v)
        users, items = self.final_embeddings()
        return float(users[u] @ items[v])

    def score_matrix(self, users=None):
        """Scores of the given users (default all) against every item."""
        ue, ie = self.final_embeddings()
        if users is not None:
            ue = ue[np.asarray(users, dtype=np.int64)]
        return ue @ ie.T

    def loss_and_grad(self, users, pos, neg, eta):
        """BPR loss (summed over triples) and its gradient w.r.t. table values.

        The L2 term covers the retained coordinates of each distinct row
        touched by the batch. The gradient is zero outside the mask.
        """
        users = np.asarray(users, dtype=np.int64)
        pos = np.asarray(pos, dtype=np.int64)
        neg = np.asarray(neg, dtype=np.int64)
        mask = self.table.mask()
        emb = np.where(mask, self.table.values, 0.0)
        final = self.propagate(emb)
        iu = users
        ip = pos + self.num_users
        ineg = neg + self.num_users
        eu, ep, en = final[iu], final[ip], final[ineg]
        x = np.einsum("ij,ij->i", eu, ep - en)
        loss = float(_log_sigmoid_neg(x).sum())
        g = -_sigmoid(-x)[:, None]  # d loss / d x
        grad_final = np.zeros_like(final)
        np.add.at(grad_final, iu, g * (ep - en))
        np.add.at(grad_final, ip, g * eu)
        np.add.at(grad_final, ineg, -g * eu)
        grad = self.propagate(grad_final)
        if eta:
            touched = np.unique(np.concatenate([iu, ip, ineg]))
            loss += eta * float(np.sum(emb[touched] ** 2))
            grad[touched] += 2.0 * eta * emb[touched]
        grad[~mask] = 0.0
        return loss, grad

    def bpr_loss(self, users, pos, neg, eta):
        return self.loss_and_grad(users, pos, neg, eta)[0]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_ensemble: float | None
    lr: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    epochs: list
    best_epoch: int
    best_val: float | None
    steps: int

    def to_dict(self):
        return {"epochs": [e.to_dict() for e in self.epochs], "best_epoch": self.best_epoch,
                "best_val": self.best_val, "steps": self.steps}


def _steps_per_epoch(ds, batch_size):
    return max(1, math.ceil(len(ds.train) / batch_size))


def _run_epoch(model, ds, cfg, rng, step):
    total = 0.0
    for _ in range(_steps_per_epoch(ds, cfg.batch_size)):
        batch = sample_bpr_batch(ds, cfg.batch_size, rng)
        loss, grad = model.loss_and_grad(batch.users, batch.pos, batch.neg, cfg.l2_coeff)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite loss {loss} at step {step} "
                                 f"(lr={cfg.lr_at(step):.4g}, "
                                 f"max|theta|={np.abs(model.table.values).max():.3g})")
        model.table.values -= cfg.lr_at(step) * grad
        total += loss
        step += 1
    return total, step


def train(model, ds, cfg, rng, evaluate=None, log=None):
    """Mini-batch gradient descent to convergence with early stopping.

    ``evaluate(model) -> float`` scores the validation split; when given,
    training stops after ``cfg.patience`` evaluations without improvement
    and the best parameters seen are restored.
    """
    cfg.validate()
    records = []
    step = 0
    best_val, best_epoch, best_values = None, 0, None
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.lr_at(step)
        loss, step = _run_epoch(model, ds, cfg, rng, step)
        val = None
        if evaluate is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs):
            val = float(evaluate(model))
            if best_val is None or val > best_val:
                best_val, best_epoch, best_values = val, epoch, model.table.values.copy()
                stale = 0
            else:
                stale += 1
        rec = EpochRecord(epoch, loss, val, lr)
        records.append(rec)
        if log is not None:
            log(rec)
        if evaluate is not None and stale >= cfg.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    if best_values is not None:
        model.table.values[...] = best_values
    else:
        best_epoch = len(records)
    return TrainReport(records, best_epoch, best_val, step)


def finetune(model, ds, action, epochs, cfg, rng):
    """Apply ``action`` to ``model`` and run ``epochs`` epochs of BPR updates.

    Callers pass a fresh copy of the pretrained model; masked-out values
    are never touched.
    """
    apply_action(model.table, action)
    step = 0
    losses = []
    for _ in range(epochs):
        loss, step = _run_epoch(model, ds, cfg, rng, step)
        losses.append(loss)
    return losses


def save_model(model, directory):
    """Persist a backbone as ``table.npy`` + ``model.json`` (deterministic bytes)."""
    os.makedirs(directory, exist_ok=True)
    np.save(os.path.join(directory, "table.npy"), model.table.values)
    np.save(os.path.join(directory, "row_sizes.npy"), model.table.row_sizes)
    meta = {"num_users": model.num_users, "num_items": model.num_items,
            "scorer": model.scorer, "layers": model.layers, "d_max": model.d_max,
            "has_action": model.table.has_action}
    with open(os.path.join(directory, "model.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(directory, ds):
    with open(os.path.join(directory, "model.json")) as fh:
        meta = json.load(fh)
    if (meta["num_users"], meta["num_items"]) != (ds.num_users, ds.num_items):
        raise ValueError("model was trained on a dataset of a different shape")
    table = MaskedEmbeddingTable(np.load(os.path.join(directory, "table.npy")))
    if meta.get("has_action"):
        apply_action(table, np.load(os.path.join(directory, "row_sizes.npy")))
    adj = normalized_adjacency(ds.num_users, ds.num_items, ds.train) if meta["scorer"] == "lightgcn" else None
    return Backbone(table, meta["num_users"], meta["num_items"], meta["scorer"], meta["layers"], adj)
