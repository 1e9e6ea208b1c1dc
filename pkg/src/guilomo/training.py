"""Loss computation, evaluation, and final fine-tuning for the toy model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bilevel import AdamWOptimizer, SGDOptimizer, cosine_scale
from .lora_moe import balance_loss
from .numerics import Tensor, cross_entropy, no_grad
from .seeding import rng_for
from .tasks import Batch, TaskData

__all__ = ["LossParts", "TrainingDivergence", "sft_loss", "combined_loss",
           "evaluate_model", "finetune"]


class TrainingDivergence(RuntimeError):
    """Fine-tuning loss blew past the divergence guard."""


@dataclass
class LossParts:
    total: Tensor
    sft: float
    bal: float


def sft_loss(model, batch: Batch) -> tuple[Tensor, list]:
    """Mean cross-entropy over the answered positions of a batch.

    Returns the loss tensor and the routing stats collected during the
    forward pass so the caller can add the balance penalty.
    """
    tokens = batch.tokens
    length = tokens.shape[1]
    positions = np.asarray(batch.answer_positions, dtype=np.int64)
    if positions.size == 0:
        raise ValueError("sft_loss: empty answer span")
    if positions.min() < 1 or positions.max() >= length:
        raise ValueError(
            f"sft_loss: answer positions {positions} outside [1, {length})"
        )
    logits, stats = model.forward(tokens[:, :-1])
    answer_logits = logits[:, positions - 1, :]
    targets = tokens[:, positions]
    return cross_entropy(answer_logits, targets), stats


def combined_loss(model, batch: Batch, c_balance: float) -> LossParts:
    """Task loss plus the mean balance penalty over all adapted modules."""
    sft, stats = sft_loss(model, batch)
    total = sft
    bal_value = 0.0
    if stats and c_balance > 0.0:
        penalties = [balance_loss(st, c_balance) for st in stats]
        bal = penalties[0]
        for p in penalties[1:]:
            bal = bal + p
        bal = bal * (1.0 / len(penalties))
        total = sft + bal
        bal_value = bal.item()
    return LossParts(total=total, sft=sft.item(), bal=bal_value)


def _accuracy(model, data: TaskData, batch_size: int) -> tuple[float, float]:
    positions = np.asarray(data.answer_positions, dtype=np.int64)
    correct = 0
    counted = 0
    loss_sum = 0.0
    with no_grad():
        for start in range(0, len(data), batch_size):
            batch = data.batch(np.arange(start, min(start + batch_size, len(data))))
            logits, _ = model.forward(batch.tokens[:, :-1])
            answer_logits = logits.values[:, positions - 1, :]
            targets = batch.tokens[:, positions]
            pred = answer_logits.argmax(axis=-1)
            correct += int((pred == targets).sum())
            counted += targets.size
            flat = answer_logits.reshape(-1, answer_logits.shape[-1])
            ids = targets.reshape(-1)
            m = flat.max(axis=-1)
            lse = m + np.log(np.exp(flat - m[:, None]).sum(axis=-1))
            loss_sum += float((lse - flat[np.arange(flat.shape[0]), ids]).sum())
    return correct / counted, loss_sum / counted


def evaluate_model(model, data: TaskData, batch_size: int = 64) -> dict[str, float]:
    """Per-token accuracy and mean cross-entropy over the answer positions."""
    accuracy, loss = _accuracy(model, data, batch_size)
    return {"accuracy": accuracy, "sft_loss": loss}


def finetune(model, train: TaskData, epochs: int, lr: float,
             eval_data: TaskData | None = None, batch_size: int = 32,
             c_balance: float = 1e-3, seed: int = 0, schedule: str = "cosine",
             optimizer: str = "adamw", betas: tuple[float, float] = (0.9, 0.999),
             eps: float = 1e-8, divergence_factor: float = 10.0) -> list[dict]:
    """Train the adapter parameters of a materialized (or search) model.

    The base network stays frozen; only expert and router tensors are
    updated. Returns one metrics row per epoch. Raises
    ``TrainingDivergence`` if the running loss exceeds
    ``divergence_factor`` times the initial loss.
    """
    params = model.named_model_parameters()
    if optimizer == "adamw":
        opt = AdamWOptimizer(params, lr=lr, betas=betas, eps=eps, weight_decay=0.0)
    elif optimizer == "sgd":
        opt = SGDOptimizer(params, lr=lr)
    else:
        raise ValueError(f"finetune: unknown optimizer {optimizer!r}")

    n = len(train)
    steps_per_epoch = max(1, -(-n // batch_size))
    total_steps = epochs * steps_per_epoch
    initial_loss: float | None = None
    history: list[dict] = []
    step = 0
    for epoch in range(epochs):
        order = rng_for(seed, "finetune_order", epoch).permutation(n)
        epoch_loss = 0.0
        for slot in range(steps_per_epoch):
            rows = order[slot * batch_size:(slot + 1) * batch_size]
            if rows.size == 0:
                continue
            for p in params.values():
                p.zero_grad()
            parts = combined_loss(model, train.batch(rows), c_balance)
            if initial_loss is None:
                initial_loss = parts.sft
            if not np.isfinite(parts.sft) or (
                initial_loss > 0 and parts.sft > divergence_factor * initial_loss
            ):
                raise TrainingDivergence(
                    f"finetune: loss {parts.sft:.4f} at epoch {epoch} step {slot} "
                    f"exceeds {divergence_factor}x initial {initial_loss:.4f}"
                )
            parts.total.backward()
            scale = cosine_scale(step, total_steps) if schedule == "cosine" else 1.0
            opt.step(scale)
            epoch_loss += parts.sft
            step += 1
        row = {"epoch": epoch, "train_loss": epoch_loss / steps_per_epoch}
        if eval_data is not None:
            row.update(evaluate_model(model, eval_data))
        history.append(row)
    return history
