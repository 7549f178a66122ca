"""SGD with momentum and weight decay, and the EdgeNet training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from panograph.edgenet.model import EdgeNetInput, EdgeNetParams, check_params, init_params, loss_and_grad_prepared
from panograph.errors import TrainingError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainState:
    params: EdgeNetParams
    momentum: EdgeNetParams
    step: int = 0
    epoch: int = 0
    lr: float = 0.001
    momentum_coef: float = 0.9
    weight_decay: float = 0.0005

    @classmethod
    def fresh(cls, params: EdgeNetParams, **hyper) -> TrainState:
        check_params(params)
        return cls(params=params, momentum={k: np.zeros_like(v) for k, v in params.items()}, **hyper)


def sgd_step(state: TrainState, grads: EdgeNetParams) -> TrainState:
    """``v <- mu * v + (g + wd * theta)``; ``theta <- theta - lr * v``.

    Arithmetic is float64; results are stored back in each parameter's dtype.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradients at step {state.step} in {', '.join(sorted(bad))}")
    if set(grads) != set(state.params):
        raise TrainingError("gradient keys do not match parameters")
    params, momentum = {}, {}
    for name, theta in state.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise TrainingError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        t64 = theta.astype(np.float64)
        v = state.momentum_coef * state.momentum[name].astype(np.float64) + (g + state.weight_decay * t64)
        momentum[name] = v.astype(state.momentum[name].dtype)
        params[name] = (t64 - state.lr * v).astype(theta.dtype)
    return replace(state, params=params, momentum=momentum, step=state.step + 1)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 1
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    class_weights: bool = True
    tau: float = 0.5
    seed: int = 0


@dataclass
class TrainSample:
    """A prepared frame with its ground-truth edge labels."""

    inp: EdgeNetInput
    labels: np.ndarray
    name: str = ""


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    edge_accuracy: float


@dataclass
class TrainResult:
    state: TrainState
    history: list[EpochStats] = field(default_factory=list)


def edge_accuracy_counts(probs, labels, tau: float) -> tuple[int, int]:
    """Correct and total off-diagonal pairs after symmetric thresholding."""
    n = len(labels)
    if n < 2:
        return 0, 0
    p = probs[..., 1]
    pred = 0.5 * (p + p.T) > tau
    off = ~np.eye(n, dtype=bool)
    return int(np.sum((pred == labels) & off)), int(off.sum())


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Frame visiting order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    samples: Sequence[TrainSample],
    config: TrainConfig,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState, EpochStats], None] | None = None,
    dump_dir: str | Path | None = None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs, continuing from ``state.epoch`` when resuming.

    Gradients of a batch are summed in visiting order and divided by the
    batch size, so a run is bit-reproducible for a fixed seed.
    """
    if not samples:
        raise TrainingError("empty training set")
    if state is None:
        state = TrainState.fresh(init_params(config.seed), lr=config.lr, momentum_coef=config.momentum, weight_decay=config.weight_decay)
    result = TrainResult(state)
    for epoch in range(state.epoch, config.epochs):
        order = epoch_order(config.seed, epoch, len(samples))
        losses, correct, total = [], 0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            acc = None
            for i in batch:
                s = samples[i]
                loss, grads, probs = loss_and_grad_prepared(s.inp, s.labels, state.params, class_weights=config.class_weights)
                if not np.isfinite(loss):
                    _dump(state, dump_dir)
                    raise TrainingError(f"non-finite loss on sample {s.name or i} at epoch {epoch}")
                losses.append(loss)
                c, t = edge_accuracy_counts(probs, s.labels, config.tau)
                correct += c
                total += t
                if acc is None:
                    acc = {k: g.copy() for k, g in grads.items()}
                else:
                    for k in acc:
                        acc[k] += grads[k]
            for k in acc:
                acc[k] /= len(batch)
            try:
                state = sgd_step(state, acc)
            except TrainingError:
                _dump(state, dump_dir)
                raise
        state = replace(state, epoch=epoch + 1)
        stats = EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)), edge_accuracy=correct / total if total else float("nan"))
        log.info("epoch %d loss %.5f edge acc %.4f", epoch, stats.mean_loss, stats.edge_accuracy)
        result.history.append(stats)
        result.state = state
        if on_epoch is not None:
            on_epoch(state, stats)
    return result


def _dump(state: TrainState, dump_dir):
    if dump_dir is None:
        return
    from panograph.edgenet.checkpoint import save_checkpoint

    path = Path(dump_dir) / f"diverged_step{state.step}.ckpt"
    save_checkpoint(path, state)
    log.error("training diverged; state written to %s", path)
