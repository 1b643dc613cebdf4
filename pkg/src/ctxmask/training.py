"""Adam training of the pairwise loss with deterministic seeding.

One training run is single-threaded and fully determined by (seed, config,
data); independent runs may execute in parallel processes.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset, make_pairs
from .errors import ConfigError, NumericError
from .model import ModelSpec, init_params, pair_loss_batch
from .numeric import RngState

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_PAIR_STREAM = 1  # rng substream for shuffling, distinct from parameter init


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule for one run."""

    epochs: int
    learning_rate: float = 0.002
    batch_size: int = 32
    seed: int = 0
    lambda1: float = 0.0
    lambda2: float = 10.0
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    tag: str = "run"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch size must be even and >= 2")


def regression_preset(seed: int = 0, lambda1: float = 1e-4, lambda2: float = 10.0,
                      tag: str = "gp") -> TrainConfig:
    """Simulated-regression schedule: 500 epochs, lr 0.002, batch 32."""
    return TrainConfig(
        epochs=500, learning_rate=0.002, batch_size=32, seed=seed,
        lambda1=lambda1, lambda2=lambda2, tag=tag,
    )


def pushing_preset(seed: int = 0, context_kind: str = "indicator",
                   epochs: int = 3000, tag: str = "push") -> TrainConfig:
    """Pushing schedule: up to 3000 epochs, lr 0.002, batch 64.

    Regularization weights follow the context kind: (0.01, 10) for indicator,
    (0.01, 0.01) for visual.
    """
    if epochs > 3000:
        raise ConfigError("pushing preset trains for at most 3000 epochs")
    lambda2 = 10.0 if context_kind == "indicator" else 0.01
    return TrainConfig(
        epochs=epochs, learning_rate=0.002, batch_size=64, seed=seed,
        lambda1=0.01, lambda2=lambda2, tag=tag,
    )


class AdamState:
    """First/second moment estimates over the store's flat parameter buffer."""

    def __init__(self, store: ad.ParameterStore):
        n = store.flat_values.size
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.step_count = 0
        self._buf = np.empty(n)


def adam_step(
    store: ad.ParameterStore,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update in place over all parameters."""
    if not store.grads_ready:
        raise ConfigError("adam_step called without a preceding backward pass")
    store.grads_ready = False
    state.step_count += 1
    t = state.step_count
    g = store.flat_grads
    m, v, buf = state.m, state.v, state._buf

    m *= beta1
    np.multiply(g, 1.0 - beta1, out=buf)
    m += buf
    v *= beta2
    np.multiply(g, g, out=buf)
    buf *= 1.0 - beta2
    v += buf

    # denom = sqrt(v_hat) + eps with v_hat = v / (1 - beta2^t)
    np.sqrt(v, out=buf)
    buf /= math.sqrt(1.0 - beta2**t)
    buf += eps
    np.divide(m, buf, out=buf)
    buf *= lr / (1.0 - beta1**t)
    store.flat_values -= buf


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    mean_nll: float
    mean_reg: float


def write_trace_csv(trace: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "mean_nll", "mean_reg"])
        for row in trace:
            writer.writerow(
                [row.epoch, f"{row.mean_loss:.12g}", f"{row.mean_nll:.12g}",
                 f"{row.mean_reg:.12g}"]
            )


def train(
    spec: ModelSpec,
    train_data: Dataset,
    cfg: TrainConfig,
    out_dir: str | None = None,
) -> tuple[ad.ParameterStore, list[EpochStats]]:
    """Run the full schedule; returns last-epoch parameters and the loss trace.

    Each epoch streams pair batches, backpropagates the mean pair loss and
    applies one Adam step per batch. The returned parameters are from the
    last epoch (no early stopping).
    """
    if spec.needs_context and spec.context_kind != train_data.context_kind:
        raise ConfigError(
            f"model expects {spec.context_kind} contexts, data has "
            f"{train_data.context_kind}"
        )
    if spec.input_dim != train_data.input_dim or spec.output_dim != train_data.output_dim:
        raise ConfigError(
            f"model dims ({spec.input_dim}->{spec.output_dim}) do not match data "
            f"({train_data.input_dim}->{train_data.output_dim})"
        )
    store = init_params(spec, cfg.seed)
    state = AdamState(store)
    pair_rng = RngState(cfg.seed).split(_PAIR_STREAM)
    x_all, y_all, ctx_all = train_data.arrays()
    needs_ctx = spec.needs_context
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    trace: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        loss_sum = nll_sum = reg_sum = 0.0
        pair_count = 0
        for batch_no, (idx_i, idx_j) in enumerate(
            make_pairs(train_data, cfg.batch_size, pair_rng)
        ):
            loss, nll, reg = pair_loss_batch(
                x_all[idx_i], y_all[idx_i], x_all[idx_j], y_all[idx_j],
                ctx_all[idx_i] if needs_ctx else None,
                ctx_all[idx_j] if needs_ctx else None,
                spec, store,
            )
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite loss {value} at epoch {epoch}, batch {batch_no}"
                )
            ad.backward(loss, store)
            adam_step(store, state, cfg.learning_rate)
            n = len(idx_i)
            loss_sum += value * n
            nll_sum += nll * n
            reg_sum += reg * n
            pair_count += n
        trace.append(
            EpochStats(epoch, loss_sum / pair_count, nll_sum / pair_count,
                       reg_sum / pair_count)
        )
        if (
            out_dir is not None
            and cfg.checkpoint_every > 0
            and (epoch + 1) % cfg.checkpoint_every == 0
        ):
            store.save(os.path.join(out_dir, f"{cfg.tag}-epoch{epoch + 1}.json"))
    if out_dir is not None:
        store.save(os.path.join(out_dir, f"{cfg.tag}-epoch{cfg.epochs}.json"))
        write_trace_csv(trace, os.path.join(out_dir, f"{cfg.tag}-trace.csv"))
    return store, trace
