"""Seeded synthetic identity populations with paired image and text embeddings.

Each identity gets a latent unit vector. Image embeddings are a noisy view of
that latent projected into image space; text token embeddings mix the
projected latent with identity-independent content, controlled by an
informativeness knob in [0, 1] (1 = tokens carry pure identity signal, 0 =
tokens say nothing about the identity). All embeddings are unit-normalized.

Determinism: one Philox stream per purpose (latents, projections, image
noise, text noise), spawned from the config seed in a fixed order, with all
draws made in fixed block order. Identical configs produce bitwise-identical
populations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .core import EmbeddingRecord, InvalidConfigError, Modality


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    n_identities: int
    images_per_identity: int
    dim_image: int
    dim_text: int
    noise_scale: float = 0.05
    text_informativeness: float = 1.0
    tokens_per_text: int = 4

    def __post_init__(self) -> None:
        if self.n_identities < 1:
            raise InvalidConfigError("n_identities must be >= 1")
        if self.images_per_identity < 2:
            raise InvalidConfigError("images_per_identity must be >= 2")
        if self.dim_image < 1 or self.dim_text < 1:
            raise InvalidConfigError("embedding dims must be >= 1")
        if self.noise_scale < 0:
            raise InvalidConfigError("noise_scale must be >= 0")
        if not 0.0 <= self.text_informativeness <= 1.0:
            raise InvalidConfigError("text_informativeness must lie in [0, 1]")
        if self.tokens_per_text < 1:
            raise InvalidConfigError("tokens_per_text must be >= 1")


def config_to_dict(config: SynthConfig) -> dict[str, Any]:
    return {
        "seed": config.seed,
        "n_identities": config.n_identities,
        "images_per_identity": config.images_per_identity,
        "dim_image": config.dim_image,
        "dim_text": config.dim_text,
        "noise_scale": config.noise_scale,
        "text_informativeness": config.text_informativeness,
        "tokens_per_text": config.tokens_per_text,
    }


def _stream(seed_seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_seq))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _orthonormal_projection(
    rng: np.random.Generator, out_dim: int, in_dim: int
) -> np.ndarray:
    """QR of a seeded gaussian; columns orthonormal, so norms are preserved."""
    gaussian = rng.standard_normal((out_dim, in_dim))
    q, r = np.linalg.qr(gaussian)
    # fix the column signs so the factorization is unique
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def identity_label(index: int) -> str:
    return f"id{index:04d}"


def image_label(identity_index: int, image_index: int) -> str:
    return f"id{identity_index:04d}-{image_index:03d}"


def gen_population(
    config: SynthConfig,
) -> tuple[list[EmbeddingRecord], list[EmbeddingRecord]]:
    """Generate (image_records, text_records), one caption per image.

    Latents live in min(dim_image, dim_text) dimensions and reach each
    modality space through a fixed seeded orthonormal projection, so the
    projected latent is still a unit vector and the noise scale means the
    same thing in both spaces.
    """
    root = np.random.SeedSequence(config.seed)
    latent_ss, proj_ss, image_ss, text_ss = root.spawn(4)

    latent_dim = min(config.dim_image, config.dim_text)
    latents = _unit_rows(_stream(latent_ss).standard_normal((config.n_identities, latent_dim)))

    proj_rng = _stream(proj_ss)
    proj_image = _orthonormal_projection(proj_rng, config.dim_image, latent_dim)
    proj_text = _orthonormal_projection(proj_rng, config.dim_text, latent_dim)

    n, m, t = config.n_identities, config.images_per_identity, config.tokens_per_text
    rho = config.text_informativeness
    sigma = config.noise_scale

    mean_image = latents @ proj_image.T
    image_noise = _stream(image_ss).standard_normal((n, m, config.dim_image))
    image_vectors = _unit_rows(mean_image[:, None, :] + sigma * image_noise)

    mean_text = latents @ proj_text.T
    text_rng = _stream(text_ss)
    content = text_rng.standard_normal((n, m, t, config.dim_text))
    text_noise = text_rng.standard_normal((n, m, t, config.dim_text))
    token_vectors = _unit_rows(
        rho * mean_text[:, None, None, :] + (1.0 - rho) * content + sigma * text_noise
    )

    image_records: list[EmbeddingRecord] = []
    text_records: list[EmbeddingRecord] = []
    for i in range(n):
        identity = identity_label(i)
        for j in range(m):
            image_id = image_label(i, j)
            image_records.append(
                EmbeddingRecord(
                    identity_id=identity,
                    image_id=image_id,
                    modality=Modality.IMAGE,
                    vector=image_vectors[i, j].astype(np.float32),
                    dim=config.dim_image,
                )
            )
            text_records.append(
                EmbeddingRecord(
                    identity_id=identity,
                    image_id=image_id,
                    modality=Modality.TEXT_TOKENS,
                    vector=token_vectors[i, j].astype(np.float32),
                    dim=config.dim_text,
                )
            )
    return image_records, text_records
