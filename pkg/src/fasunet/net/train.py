"""Loss, SGD with momentum and poly learning-rate decay, the training loop and
the finite-difference gradient checker."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .. import metrics
from ..fusion import one_hot
from . import autodiff as ad
from .network import NetConfig, ParamStore, collect_grads, forward, predict

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 150
    power: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("lr0 must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


def learning_rate(t: int, cfg: TrainConfig) -> float:
    """Poly decay ``lr0 (1 - t / max_epochs)^power``."""
    frac = min(max(t / cfg.max_epochs, 0.0), 1.0)
    return cfg.lr0 * (1.0 - frac) ** cfg.power


def sgd_step(store: ParamStore, t: int, cfg: TrainConfig) -> float:
    """``v <- m v + g + wd w``; ``w <- w - lr_t v``.  BN affine entries get no decay."""
    lr = learning_rate(t, cfg)
    for p in store.params.values():
        g = p.grad
        if cfg.weight_decay and p.group != "bn":
            g = g + cfg.weight_decay * p.value
        p.momentum *= cfg.momentum
        p.momentum += g
        p.value -= lr * p.momentum
    return lr


def loss_and_grad(store: ParamStore, cfg: NetConfig, images, labels, mode: str = "train"):
    """One forward/backward pass; gradients land in ``store``'s buffers.

    Returns ``(loss, probabilities)``.
    """
    tape = ad.Tape()
    s = forward(images, store, cfg, mode, tape)
    loss = ad.cross_entropy(s, one_hot(labels, cfg.classes))
    store.zero_grad()
    tape.backward(loss)
    collect_grads(tape, store)
    return float(loss.value), s.value


def evaluate_loss(store: ParamStore, cfg: NetConfig, images, labels, mode: str = "eval"):
    tape = ad.Tape()
    s = forward(images, store, cfg, mode, tape)
    loss = ad.cross_entropy(s, one_hot(labels, cfg.classes))
    return float(loss.value), s.value, tape


def mean_dsc(pred, gt, c: int) -> float:
    """a-DSC averaged over the foreground classes of every sample."""
    vals = [np.mean([metrics.dsc(p, g, k) for k in range(1, c)]) for p, g in zip(pred, gt)]
    return float(np.mean(vals))


@dataclass
class TrainResult:
    store: ParamStore
    losses: list[float] = field(default_factory=list)
    dscs: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def train(images: np.ndarray, labels: np.ndarray, cfg: NetConfig, tcfg: TrainConfig,
          store: Optional[ParamStore] = None, epochs: Optional[int] = None,
          callback: Optional[Callable[[int, float, float], Optional[bool]]] = None) -> TrainResult:
    """Mini-batch training with a fixed-seed shuffle.

    ``images`` is ``n x c_in x H x W`` and ``labels`` is ``n x H x W``.  The
    per-epoch loss is the sample-weighted mean over mini-batches; the DSC
    trace is the a-DSC of the train-mode predictions seen during the epoch.
    ``callback(epoch, loss, dsc)`` runs after every epoch; a true return value
    stops training early.  The learning-rate schedule always spans
    ``tcfg.max_epochs``.
    """
    from .network import init_params

    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if images.shape[0] != labels.shape[0] or images.shape[2:] != labels.shape[1:]:
        raise ValueError(f"images {images.shape} and labels {labels.shape} are inconsistent")
    store = store if store is not None else init_params(cfg, tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    n = len(images)
    res = TrainResult(store)
    for epoch in range(epochs if epochs is not None else tcfg.max_epochs):
        order = rng.permutation(n)
        tot, preds = 0.0, np.empty_like(labels)
        lr = learning_rate(epoch, tcfg)
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            loss, s = loss_and_grad(store, cfg, images[idx], labels[idx], "train")
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            sgd_step(store, epoch, tcfg)
            tot += loss * len(idx)
            preds[idx] = predict(s)
        res.losses.append(tot / n)
        res.dscs.append(mean_dsc(preds, labels, cfg.classes))
        res.lrs.append(lr)
        log.debug("epoch %d loss %.6f a-DSC %.4f lr %.5f", epoch, res.losses[-1], res.dscs[-1], lr)
        if callback is not None and callback(epoch, res.losses[-1], res.dscs[-1]):
            break
    return res


@dataclass
class GradCheckResult:
    max_rel_error: float
    probes: list[tuple[str, tuple[int, ...], float, float, float]]
    rejected: int = 0


def rel_error(a: float, b: float, floor: float = 1e-4) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(store: ParamStore, loss_fn: Callable[[ParamStore], tuple[float, ad.Tape]],
                   grad_fn: Callable[[ParamStore], None], n_probes: int = 50,
                   step: float = 1e-6, seed: int = 0, names: Optional[Sequence[str]] = None,
                   floor: float = 1e-4) -> GradCheckResult:
    """Compare recorded gradients with central differences (default step 1e-6).

    ``loss_fn`` evaluates the loss without mutating ``store`` and returns the
    tape so ReLU and probability-clamp patterns can be compared; a probe
    whose +/- step crosses any such kink is redrawn.  ``grad_fn`` fills ``store``'s gradient
    buffers.  The relative error uses ``max(|a|, |b|, floor)`` as denominator.
    """
    grad_fn(store)
    grads = {k: p.grad.copy() for k, p in store.items()}
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else list(store)
    probes, rejected, worst = [], 0, 0.0
    while len(probes) < n_probes:
        name = names[rng.integers(len(names))]
        val = store[name].value
        idx = tuple(int(rng.integers(s)) for s in val.shape)
        orig = val[idx]
        val[idx] = orig + step
        lp, tp = loss_fn(store)
        val[idx] = orig - step
        lm, tm = loss_fn(store)
        val[idx] = orig
        if any(not np.array_equal(a, b) for a, b in zip(tp.kink_masks, tm.kink_masks)):
            rejected += 1
            if rejected > 20 * n_probes:
                raise RuntimeError("could not find probes away from ReLU/clamp kinks")
            continue
        fd = (lp - lm) / (2 * step)
        an = float(grads[name][idx])
        err = rel_error(fd, an, floor)
        worst = max(worst, err)
        probes.append((name, idx, an, fd, err))
    return GradCheckResult(worst, probes, rejected)


def warm_up_batchnorm(store: ParamStore, cfg: NetConfig, images, passes: int = 20) -> None:
    """Run train-mode forward passes so running statistics match the data."""
    for _ in range(passes):
        forward(images, store, cfg, "train")


def check_network_gradients(store: ParamStore, cfg: NetConfig, images, labels,
                            n_probes: int = 50, step: float = 1e-6, seed: int = 0,
                            mode: str = "eval") -> GradCheckResult:
    """Gradient check of the cross-entropy loss of the full network.

    Train-mode batch norm updates running statistics on every pass, so the
    store is snapshotted per evaluation in that mode.
    """
    def loss_fn(st):
        work = st.copy() if mode == "train" else st
        loss, _, tape = evaluate_loss(work, cfg, images, labels, mode)
        return loss, tape

    def grad_fn(st):
        work = st.copy() if mode == "train" else st
        loss_and_grad(work, cfg, images, labels, mode)
        if work is not st:
            for k, p in work.items():
                st[k].grad[...] = p.grad
    return gradient_check(store, loss_fn, grad_fn, n_probes, step, seed)
