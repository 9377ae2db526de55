"""Seeded training loop: balanced batches, combined loss, one Adam step each.

Only fusion parameters train; embeddings are fixed inputs. With no model
(image-only baseline) the loop still plans epochs and records the batch loss
on the raw image embeddings, it just never updates anything.

Seed discipline: the run seed spawns two child streams, one that yields the
model-init seed and one that yields per-epoch sampler seeds. derive_seeds is
public so a caller can reconstruct the exact initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .core import EmbeddingRecord, InvalidConfigError, LossConfig
from .fusion import FusionModel, fuse, fuse_backward, param_order
from .losses import batch_loss, batch_loss_grad
from .sampler import plan_epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    n_identities_per_batch: int = 58
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = LossConfig()

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise InvalidConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise InvalidConfigError("epochs must be >= 1")
        if self.n_identities_per_batch < 1:
            raise InvalidConfigError("n_identities_per_batch must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidConfigError("betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise InvalidConfigError("adam_eps must be > 0")


@dataclass(frozen=True)
class AdamState:
    first_moment: Mapping[str, NDArray[np.float64]]
    second_moment: Mapping[str, NDArray[np.float64]]
    step: int = 0


def init_adam_state(params: Mapping[str, NDArray[np.float64]]) -> AdamState:
    return AdamState(
        first_moment={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
        second_moment={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
        step=0,
    )


def adam_step(
    params: Mapping[str, NDArray[np.float64]],
    grads: Mapping[str, NDArray[np.float64]],
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, NDArray[np.float64]], AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.step + 1
    new_params: dict[str, NDArray[np.float64]] = {}
    new_m: dict[str, NDArray[np.float64]] = {}
    new_v: dict[str, NDArray[np.float64]] = {}
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = beta1 * state.first_moment[name] + (1.0 - beta1) * g
        v = beta2 * state.second_moment[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = theta - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(first_moment=new_m, second_moment=new_v, step=t)


def derive_seeds(seed: int, epochs: int) -> tuple[int, list[int]]:
    """(model_init_seed, per-epoch sampler seeds) for a run seed."""
    model_ss, epoch_ss = np.random.SeedSequence(seed).spawn(2)
    model_seed = int(model_ss.generate_state(1, dtype=np.uint64)[0])
    epoch_seeds = [int(s) for s in epoch_ss.generate_state(epochs, dtype=np.uint64)]
    return model_seed, epoch_seeds


def index_by_image(
    records: Sequence[EmbeddingRecord], what: str
) -> dict[str, EmbeddingRecord]:
    index: dict[str, EmbeddingRecord] = {}
    for record in records:
        if record.image_id in index:
            raise InvalidConfigError(f"duplicate image_id {record.image_id!r} in {what}")
        index[record.image_id] = record
    return index


def train(
    model: FusionModel | None,
    image_records: Sequence[EmbeddingRecord],
    text_records: Sequence[EmbeddingRecord] | None,
    config: TrainConfig,
) -> tuple[FusionModel | None, list[float]]:
    """Run the full loop; returns (model, per-epoch mean batch loss).

    Exactly one Adam step per batch. With model=None this evaluates the loss
    on raw image embeddings and never updates (baseline path).
    """
    images = index_by_image(image_records, "image store")
    texts = index_by_image(text_records, "text store") if text_records else {}
    if model is not None:
        missing = [iid for iid in images if iid not in texts]
        if missing:
            raise InvalidConfigError(
                f"{len(missing)} image(s) lack a text record, first: {missing[0]!r}"
            )

    population: dict[str, list[str]] = {}
    for record in image_records:
        population.setdefault(record.identity_id, []).append(record.image_id)

    _, epoch_seeds = derive_seeds(config.seed, config.epochs)
    state = init_adam_state(model.params) if model is not None else None
    history: list[float] = []

    for epoch_seed in epoch_seeds:
        plans = plan_epoch(population, config.n_identities_per_batch, epoch_seed)
        batch_totals: list[float] = []
        for plan in plans:
            batch_ids: list[str] = []
            batch_images: list[str] = []
            for identity, (first, second) in plan.entries:
                batch_ids.extend((identity, identity))
                batch_images.extend((first, second))

            if model is None:
                rows = np.stack(
                    [images[iid].vector.astype(np.float64) for iid in batch_images]
                )
                batch_totals.append(batch_loss(rows, batch_ids, config.loss).total)
                continue

            rows = np.stack(
                [
                    fuse(model, images[iid].vector, texts[iid].vector)
                    for iid in batch_images
                ]
            )
            breakdown = batch_loss(rows, batch_ids, config.loss)
            batch_totals.append(breakdown.total)

            grad_rows = batch_loss_grad(rows, batch_ids, config.loss)
            total_grads = {
                name: np.zeros_like(np.asarray(model.params[name], dtype=np.float64))
                for name in param_order(model.strategy)
            }
            for row, iid in enumerate(batch_images):
                param_grads, _, _ = fuse_backward(
                    model, images[iid].vector, texts[iid].vector, grad_rows[row]
                )
                for name, grad in param_grads.items():
                    total_grads[name] += grad
            new_params, state = adam_step(
                model.params,
                total_grads,
                state,
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.adam_eps,
            )
            model = replace(model, params=new_params)
        history.append(sum(batch_totals) / len(batch_totals))
    return model, history
