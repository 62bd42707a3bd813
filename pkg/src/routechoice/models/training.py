"""Epoch-based training with best-validation model selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from ..core import NumericalError
from ..engine import Adam, masked_softmax_xent, xent_grad


@dataclass(frozen=True)
class Schedule:
    """Training budget and optimizer settings.

    ``batch_size=None`` means full-batch steps.  The learning rate follows a
    cosine decay from ``lr`` to ``lr_min`` over the epoch budget when
    ``lr_min`` is set.  ``select`` picks the returned epoch: ``"accuracy"``
    (best validation accuracy, ties to lower loss then earlier epoch) or
    ``"loss"``.
    """

    epochs: int = 50
    lr: float = 1e-3
    lr_min: float | None = None
    batch_size: int | None = 1024
    seed: int = 0
    select: str = "accuracy"

    def to_dict(self):
        return asdict(self)

    def lr_at(self, epoch):
        if self.lr_min is None or self.epochs <= 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + math.cos(math.pi * frac))


def evaluate(model, data):
    """Mean cross-entropy and accuracy of ``model`` on ``data`` (evaluation mode)."""
    data = data.compressed()
    u = model.utilities(data)
    losses, probs = masked_softmax_xent(u, data.mask, data.chosen)
    w = data.weights
    return float(np.dot(w, losses) / w.sum()), accuracy(probs, data.chosen, w)


def accuracy(probs, chosen, weights=None):
    """Share of observations whose highest-probability alternative was chosen."""
    hit = np.argmax(probs, axis=1) == np.asarray(chosen)
    if weights is None:
        return float(np.mean(hit))
    return float(np.dot(weights, hit) / np.sum(weights))


def loss_and_grad(model, data, obs_idx=None, train=True):
    """Mean loss over ``obs_idx`` and accumulate parameter gradients."""
    sub = data.compressed() if obs_idx is None else data.subset(obs_idx)
    w = np.ones(sub.n_obs) if sub.weights is None else sub.weights
    u_rows = model.row_utilities(sub.rows, train=train)
    safe = np.maximum(sub.index, 0)
    u = np.where(sub.mask, u_rows[safe], 0.0)
    losses, probs = masked_softmax_xent(u, sub.mask, sub.chosen)
    g = xent_grad(probs, sub.chosen, w / w.sum())
    du_rows = np.bincount(safe[sub.mask], weights=g[sub.mask], minlength=len(sub.rows))
    model.zero_grad()
    model.backward_rows(du_rows)
    return float(np.dot(w, losses) / w.sum())


@dataclass
class FittedModel:
    model: object
    best_epoch: int
    history: list = field(default_factory=list)
    valid_loss: float = float("nan")
    valid_acc: float = float("nan")


def _better(cand, best, select):
    acc, loss, epoch = cand
    b_acc, b_loss, b_epoch = best
    if select == "loss":
        return loss < b_loss
    if acc != b_acc:
        return acc > b_acc
    return loss < b_loss


def train(model, train_data, valid_data, schedule=Schedule(), log=None):
    """Train ``model`` and return the state of its best validation epoch.

    Epoch 0 denotes the initial state; epochs ``1..budget`` follow each pass
    over the training data.
    """
    if hasattr(model, "calibrate"):
        model.calibrate(train_data.rows)
    opt = Adam(model.params(), lr=schedule.lr)
    rng = np.random.default_rng(schedule.seed)
    loss0, acc0 = evaluate(model, valid_data)
    best = (acc0, loss0, 0)
    best_state = model.get_state()
    history = [{"epoch": 0, "train_loss": float("nan"), "valid_loss": loss0, "valid_acc": acc0}]
    n = train_data.n_obs
    step = 0
    for epoch in range(1, schedule.epochs + 1):
        opt.lr = schedule.lr_at(epoch - 1)
        if schedule.batch_size is None or schedule.batch_size >= n:
            batches = [None]
        else:
            order = rng.permutation(n)
            batches = [order[a:a + schedule.batch_size] for a in range(0, n, schedule.batch_size)]
        total = 0.0
        for b, idx in enumerate(batches):
            model.set_step(step)
            loss = loss_and_grad(model, train_data, idx)
            if not np.isfinite(loss) or any(not np.all(np.isfinite(p.grad)) for p in model.params()):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {b} (lr={opt.lr:g})",
                    lr=opt.lr, epoch=epoch, batch=b,
                )
            opt.step()
            step += 1
            total += loss * (n if idx is None else len(idx))
        v_loss, v_acc = evaluate(model, valid_data)
        history.append({"epoch": epoch, "train_loss": total / n, "valid_loss": v_loss,
                        "valid_acc": v_acc})
        if log is not None:
            log(history[-1])
        if _better((v_acc, v_loss, epoch), best, schedule.select):
            best = (v_acc, v_loss, epoch)
            best_state = model.get_state()
    model.set_state(best_state)
    model.eval()
    return FittedModel(model, best[2], history, best[1], best[0])
