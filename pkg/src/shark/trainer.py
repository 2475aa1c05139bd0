"""Adam optimisation loop with validation, metric logging and checkpointing."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import AdamState, Checkpoint, save_checkpoint
from .data import DatasetManifest, ImagePair, batches, load_pairs, num_batches
from .exceptions import CheckpointError, ConfigError, NonFiniteError, ValidationError
from .losses import HarrisParams, LossWeights, SSIMParams, total_loss
from .metrics import EvalReport, evaluate_dataset
from .network import ModelConfig, NetworkParams, init_params, params_from_arrays, shark_forward

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "l1", "ssim_loss", "harris_loss", "total")


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    harris: HarrisParams = field(default_factory=HarrisParams)
    ssim: SSIMParams = field(default_factory=SSIMParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    image_size: tuple[int, int] | None = None
    max_steps: int | None = None
    checkpoint_interval: int = 0
    validation_interval: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for ``epoch``; constant unless ``lr_decay`` is set below 1."""
        return self.lr * self.lr_decay**epoch

    def describe(self) -> dict:
        out = asdict(self)
        out["image_size"] = list(self.image_size) if self.image_size else None
        return out


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Raises :class:`NonFiniteError` before touching anything if a gradient is
    NaN or Inf.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        dt = p.data.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        m_hat = m / dt(corr1)
        v_hat = v / dt(corr2)
        p.data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
        state.m[name], state.v[name] = m, v


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    val_reports: list[tuple[int, EvalReport]] = field(default_factory=list)
    best_psnr: float | None = None

    @property
    def params(self) -> NetworkParams:
        return params_from_arrays(self.checkpoint.config, self.checkpoint.params)


def _as_pairs(data, size) -> list[ImagePair]:
    if isinstance(data, DatasetManifest):
        data.check_files()
        pairs, _ = load_pairs(data, size=size)
        return pairs
    return list(data)


def _snapshot(params: NetworkParams, state: AdamState, config: TrainConfig, epoch: int, step: int, batch: int) -> Checkpoint:
    return Checkpoint(
        config=config.model,
        params={k: t.data.copy() for k, t in params.named_parameters().items()},
        adam=AdamState(
            {k: v.copy() for k, v in state.m.items()},
            {k: v.copy() for k, v in state.v.items()},
            state.t, state.lr, state.beta1, state.beta2, state.eps,
        ),
        epoch=epoch,
        step=step,
        batch=batch,
        seed=config.seed,
    )


def format_row(row: dict) -> list[str]:
    return [str(row["step"]), str(row["epoch"])] + [repr(float(row[k])) for k in LOG_COLUMNS[2:]]


def train(
    config: TrainConfig,
    train_data: DatasetManifest | Sequence[ImagePair],
    val_data: DatasetManifest | Sequence[ImagePair] | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimise the network on ``train_data``.

    Writes ``metrics.csv``, ``last.ckpt`` and (with validation data)
    ``best.ckpt`` into ``out_dir`` when it is given. The run is fully
    determined by ``config.seed``, the config and the data; resuming from a
    checkpoint reproduces the uninterrupted trajectory.
    """
    pairs = _as_pairs(train_data, config.image_size)
    if not pairs:
        raise ValidationError("training set is empty")
    val_pairs = _as_pairs(val_data, config.image_size) if val_data is not None else []

    if resume is not None:
        if resume.config != config.model:
            raise CheckpointError(f"checkpoint model {resume.config} does not match config {config.model}")
        params = params_from_arrays(resume.config, {k: v.copy() for k, v in resume.params.items()})
        state = AdamState(
            {k: v.copy() for k, v in resume.adam.m.items()},
            {k: v.copy() for k, v in resume.adam.v.items()},
            resume.adam.t, config.lr, config.beta1, config.beta2, config.eps,
        )
        epoch, step, start_batch = resume.epoch, resume.step, resume.batch
    else:
        params = init_params(config.model, config.seed)
        state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        epoch, step, start_batch = 0, 0, 0

    named = params.named_parameters()
    per_epoch = num_batches(len(pairs), config.batch_size)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.csv"
        fresh = resume is None or not log_path.exists()
        log_fh = open(log_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(log_fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_COLUMNS)

    log: list[dict] = []
    val_reports: list[tuple[int, EvalReport]] = []
    best = None

    def model(x: Tensor) -> Tensor:
        return shark_forward(x, params)

    try:
        while epoch < config.epochs:
            if config.max_steps is not None and step >= config.max_steps:
                break
            lr = config.lr_at(epoch)
            for b_idx, batch in enumerate(
                batches(pairs, config.batch_size, config.seed, epoch, start=start_batch), start=start_batch
            ):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                pred = shark_forward(batch.rainy, params)
                parts = total_loss(pred, batch.clean, config.weights, config.harris, config.ssim)
                total = parts.total.item()
                if not np.isfinite(total):
                    if out is not None:
                        save_checkpoint(_snapshot(params, state, config, epoch, step, b_idx), out / "last_good.ckpt")
                    raise NonFiniteError(f"non-finite loss at step {step + 1}; last good state saved")
                ad.backward(parts.total)
                adam_step(named, {k: t.grad for k, t in named.items()}, state, lr)
                step += 1
                row = {"step": step, "epoch": epoch, **parts.as_row()}
                log.append(row)
                if writer is not None:
                    writer.writerow(format_row(row))
                    log_fh.flush()
                if on_step is not None:
                    on_step(row)
                if b_idx + 1 == per_epoch:
                    pos = (epoch + 1, 0)
                else:
                    pos = (epoch, b_idx + 1)
                if out is not None and config.checkpoint_interval and step % config.checkpoint_interval == 0:
                    save_checkpoint(_snapshot(params, state, config, pos[0], step, pos[1]), out / "last.ckpt")
            else:
                # epoch finished without hitting max_steps
                start_batch = 0
                epoch += 1
                if val_pairs and epoch % config.validation_interval == 0:
                    report = evaluate_dataset(model, val_pairs)
                    val_reports.append((epoch, report))
                    logger.info("epoch %d: val PSNR %.3f SSIM %.4f", epoch, report.mean_psnr, report.mean_ssim)
                    if best is None or report.mean_psnr > best:
                        best = report.mean_psnr
                        if out is not None:
                            save_checkpoint(_snapshot(params, state, config, epoch, step, 0), out / "best.ckpt")
                continue
            # max_steps reached mid-epoch
            epoch, start_batch = pos
            break
    finally:
        if log_fh is not None:
            log_fh.close()

    final = _snapshot(params, state, config, epoch, step, start_batch)
    if out is not None:
        save_checkpoint(final, out / "last.ckpt")
    return TrainResult(final, log, val_reports, best)
