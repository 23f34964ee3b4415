"""Distillation training: teacher pretraining and the joint student/AE stage.

The joint objective is a weighted sum of three pairwise terms:

    L_ts  : hard-mined squared difference between teacher output and the
            student's first (teacher-mimicking) channel half
    L_aes : mean squared difference between autoencoder output and the
            student's second channel half
    L_tae : mean squared difference between teacher and autoencoder output
            (gradient reaches the autoencoder only)

The teacher is frozen throughout; one Adam step per iteration updates the
student and (when its loss paths are active) the autoencoder.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DatasetContractError, ParameterError
from .networks import Network
from .optim import AdamState, adam_step
from .rng import Rng
from .tensor import Tape, Tensor, backward, channel_slice, mse_mean, topk_mean


@dataclass
class TrainConfig:
    lambda_ts: float = 1.0
    lambda_aes: float = 1.0
    lambda_tae: float = 1.0
    lr: float = 1e-4
    iterations: int = 2000
    batch: int = 1
    hard_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_ts", "lambda_aes", "lambda_tae"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if not 0.0 < self.hard_fraction <= 1.0:
            raise ParameterError(f"hard_fraction must lie in (0, 1], got {self.hard_fraction}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.iterations < 0 or self.batch < 1:
            raise ParameterError("iterations must be >= 0 and batch >= 1")


def pair_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all entries of the squared difference cube."""
    return mse_mean(a, b)


def hard_mined_loss(d: Tensor, fraction: float) -> Tensor:
    """Mean of the top ``fraction`` share of difference-cube entries.

    k = ceil(fraction * numel); gradient is nonzero on exactly those k
    entries (ties resolved by first linear index).
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    if d.size == 0:
        raise ContractError("hard_mined_loss on an empty difference cube")
    k = math.ceil(fraction * d.size)
    return topk_mean(d, k)


def _as_batch(image: np.ndarray | Tensor) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(image)
    if t.ndim == 3:
        t = Tensor(t.data[None])
    if t.ndim != 4:
        raise ConfigError(f"image must be [C,H,W] or [N,C,H,W], got {t.ndim}-d")
    return t


def joint_step(teacher: Network, student: Network, autoencoder: Network,
               batch: list, cfg: TrainConfig, opt: AdamState) -> dict[str, float]:
    """One optimization step on a batch; returns the loss breakdown."""
    if not teacher.frozen:
        raise ContractError("joint_step: teacher must be frozen")
    totals = {"L_ts": 0.0, "L_aes": 0.0, "L_tae": 0.0, "total": 0.0}
    n = len(batch)
    if n == 0:
        raise ContractError("joint_step: empty batch")
    ae_active = cfg.lambda_aes > 0 or cfg.lambda_tae > 0
    params = dict(student.trainable_params())
    if ae_active:
        params.update({f"ae/{k}": v for k, v in autoencoder.trainable_params().items()})

    with Tape() as tape:
        batch_terms = []
        for image in batch:
            x = _as_batch(image)
            t_out = teacher.forward(x)  # frozen: records nothing
            s_out = student.forward(x)
            c = t_out.shape[1]
            if s_out.shape[1] != 2 * c:
                raise ConfigError(
                    f"student output channels {s_out.shape[1]} != 2x teacher {c}")
            s_teacher = channel_slice(s_out, 0, c)
            s_ae = channel_slice(s_out, c, 2 * c)
            diff = t_out.detach() - s_teacher
            l_ts = hard_mined_loss(diff * diff, cfg.hard_fraction)
            a_out = autoencoder.forward(x)
            l_aes = mse_mean(a_out, s_ae)
            # gradient must reach the autoencoder only, so the student half
            # is detached and the teacher side is constant anyway
            l_tae = mse_mean(t_out.detach(), a_out)
            batch_terms.append((l_ts, l_aes, l_tae))

        inv = 1.0 / n
        loss_graph = None
        for l_ts, l_aes, l_tae in batch_terms:
            for lam, term in ((cfg.lambda_ts, l_ts), (cfg.lambda_aes, l_aes),
                              (cfg.lambda_tae, l_tae)):
                if lam == 0.0:
                    continue
                piece = term if lam == 1.0 and n == 1 else (lam * inv) * term
                loss_graph = piece if loss_graph is None else loss_graph + piece
            totals["L_ts"] += l_ts.item() * inv
            totals["L_aes"] += l_aes.item() * inv
            totals["L_tae"] += l_tae.item() * inv

    totals["total"] = (cfg.lambda_ts * totals["L_ts"] + cfg.lambda_aes * totals["L_aes"]
                       + cfg.lambda_tae * totals["L_tae"])
    if loss_graph is not None:
        backward(loss_graph, tape)
        stepped = {k: p for k, p in params.items() if p.grad is not None}
        if stepped:
            adam_step(stepped, opt)
    # clear any stray gradients (e.g. params missed by zero-weighted terms)
    for p in params.values():
        p.grad = None
    return totals


def pretrain_teacher(teacher: Network, extractor: Network, images: list, cfg: TrainConfig,
                     log_path: str | None = None) -> list[float]:
    """Fit the teacher to a frozen random extractor's features; returns the
    per-iteration loss trace."""
    if teacher.frozen:
        raise ContractError("pretrain_teacher: teacher must be trainable here")
    if not extractor.frozen:
        raise ContractError("pretrain_teacher: extractor must be frozen")
    probe = _as_batch(images[0])
    e_shape = extractor.forward(probe).shape
    t_shape = teacher.forward(probe).shape
    if e_shape != t_shape:
        raise ConfigError(
            f"extractor output {e_shape} does not match teacher output {t_shape}")
    rng = Rng(cfg.seed)
    opt = AdamState(lr=cfg.lr)
    trace: list[float] = []
    params = teacher.trainable_params()
    for _ in range(cfg.iterations):
        x = _as_batch(images[rng.randint(len(images))])
        with Tape() as tape:
            target = extractor.forward(x)
            out = teacher.forward(x)
            loss = mse_mean(target.detach(), out)
        backward(loss, tape)
        adam_step(params, opt)
        trace.append(loss.item())
    if log_path is not None:
        _write_loss_log(log_path, [{"L_ts": v, "L_aes": 0.0, "L_tae": 0.0, "total": v}
                                   for v in trace])
    return trace


def train(teacher: Network, student: Network, autoencoder: Network, images: list,
          cfg: TrainConfig, labels: list[str] | None = None,
          log_path: str | None = None) -> list[dict[str, float]]:
    """Run the joint stage for cfg.iterations steps over normal-only images."""
    if labels is not None:
        for i, label in enumerate(labels):
            if label != "normal":
                raise DatasetContractError(
                    f"training split contains non-normal image at index {i} ('{label}')")
    if not images:
        raise DatasetContractError("training split is empty")
    rng = Rng(cfg.seed)
    opt = AdamState(lr=cfg.lr)
    history: list[dict[str, float]] = []
    for _ in range(cfg.iterations):
        batch = [images[rng.randint(len(images))] for _ in range(cfg.batch)]
        history.append(joint_step(teacher, student, autoencoder, batch, cfg, opt))
    if log_path is not None:
        _write_loss_log(log_path, history)
    return history


def _write_loss_log(path: str, history: list[dict[str, float]]) -> None:
    """CSV trace: iter,L_ts,L_aes,L_tae,total with 17 significant digits."""
    lines = ["iter,L_ts,L_aes,L_tae,total"]
    for i, row in enumerate(history):
        lines.append("%d,%.17g,%.17g,%.17g,%.17g"
                     % (i, row["L_ts"], row["L_aes"], row["L_tae"], row["total"]))
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
