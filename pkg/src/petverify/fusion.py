"""Image+text fusion heads with exact hand-written backward passes.

Four strategies over a learned shared space of width ``shared_dim``:

* CONCAT: project both modalities, concatenate (output 2 * shared_dim).
* WEIGHTED_TEXT: concat, but the text half is scaled by a learnable scalar.
* CROSS_ATTENTION: text tokens query image patches (single head, scaled dot
  product), attended values are mean-pooled (output shared_dim).
* GATED: a small MLP on the concatenated projections emits two logits whose
  softmax convexly combines the projected modalities (output shared_dim).

Every strategy L2-normalizes its output. ``fuse_backward`` returns exact
gradients for all parameters and both inputs, composed with an upstream
gradient and including the normalization Jacobian, so finite differences on
``dot(upstream, fuse(...))`` must agree to first order.

Sequences are mean-pooled before projection everywhere except cross
attention, which consumes them as-is; 1-d inputs to cross attention are
treated as length-1 sequences.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.typing import NDArray

from .core import (
    DimMismatchError,
    EmptyTokenSequenceError,
    NonFiniteValueError,
    ShapeMismatchError,
    StoreIOError,
    StrategyMismatchError,
)
from . import store


class FusionStrategy(enum.Enum):
    CONCAT = "concat"
    WEIGHTED_TEXT = "weighted"
    CROSS_ATTENTION = "xattn"
    GATED = "gated"


_EXTRA_PARAMS: dict[FusionStrategy, tuple[str, ...]] = {
    FusionStrategy.CONCAT: (),
    FusionStrategy.WEIGHTED_TEXT: ("text_weight",),
    FusionStrategy.CROSS_ATTENTION: ("W_query", "W_key", "W_value"),
    FusionStrategy.GATED: ("gate_W1", "gate_b1", "gate_W2", "gate_b2"),
}


def param_order(strategy: FusionStrategy) -> tuple[str, ...]:
    """Canonical parameter order: checkpoints and Adam state both use it."""
    return ("W_img", "b_img", "W_txt", "b_txt") + _EXTRA_PARAMS[strategy]


@dataclass(frozen=True, eq=False)
class FusionModel:
    strategy: FusionStrategy
    dim_image: int
    dim_text: int
    shared_dim: int
    params: Mapping[str, NDArray[np.float64]]


def output_dim(model: FusionModel) -> int:
    if model.strategy in (FusionStrategy.CONCAT, FusionStrategy.WEIGHTED_TEXT):
        return 2 * model.shared_dim
    return model.shared_dim


def param_shapes(
    strategy: FusionStrategy, dim_image: int, dim_text: int, shared_dim: int
) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "W_img": (dim_image, shared_dim),
        "b_img": (shared_dim,),
        "W_txt": (dim_text, shared_dim),
        "b_txt": (shared_dim,),
    }
    if strategy is FusionStrategy.WEIGHTED_TEXT:
        shapes["text_weight"] = ()
    elif strategy is FusionStrategy.CROSS_ATTENTION:
        for name in ("W_query", "W_key", "W_value"):
            shapes[name] = (shared_dim, shared_dim)
    elif strategy is FusionStrategy.GATED:
        shapes["gate_W1"] = (2 * shared_dim, shared_dim)
        shapes["gate_b1"] = (shared_dim,)
        shapes["gate_W2"] = (shared_dim, 2)
        shapes["gate_b2"] = (2,)
    return shapes


def init_fusion_model(
    strategy: FusionStrategy,
    dim_image: int,
    dim_text: int,
    shared_dim: int = 256,
    seed: int = 0,
) -> FusionModel:
    """Seeded init: weight matrices gaussian with std 1/sqrt(fan_in), biases
    zero, text_weight 1. Only the matrices consume randomness, drawn in
    parameter order, so equal seeds give bitwise-equal models."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    shapes = param_shapes(strategy, dim_image, dim_text, shared_dim)
    params: dict[str, NDArray[np.float64]] = {}
    for name in param_order(strategy):
        shape = shapes[name]
        if name == "text_weight":
            params[name] = np.array(1.0, dtype=np.float64)
        elif len(shape) <= 1:
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = shape[0]
            params[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
    return FusionModel(strategy, dim_image, dim_text, shared_dim, params)


# --------------------------------------------------------------------------
# forward


def _as_sequence(x: NDArray, width: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimMismatchError(f"{what} must be 1-d or 2-d, got {arr.ndim}-d")
    if arr.shape[0] == 0:
        raise EmptyTokenSequenceError(f"{what} sequence is empty")
    if arr.shape[1] != width:
        raise DimMismatchError(f"{what} width {arr.shape[1]}, expected {width}")
    return arr


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _normalize(u: np.ndarray) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(u))
    if norm == 0.0 or not np.isfinite(norm):
        raise NonFiniteValueError("fused vector has zero or non-finite norm")
    return u / norm, norm


@dataclass(frozen=True, eq=False)
class _Forward:
    """Intermediates shared by fuse and fuse_backward."""

    image_seq: np.ndarray
    text_seq: np.ndarray
    image_was_1d: bool
    text_was_1d: bool
    pooled_image: np.ndarray | None
    pooled_text: np.ndarray | None
    proj_image: np.ndarray | None
    proj_text: np.ndarray | None
    attn_inputs: tuple[np.ndarray, ...] | None  # X_t, X_p, Q, K, V, A
    gate: tuple[np.ndarray, ...] | None  # z, pre_act, hidden, logits, weights
    pre_norm: np.ndarray
    norm: float
    output: np.ndarray


def _forward(model: FusionModel, image: NDArray, text: NDArray) -> _Forward:
    image_arr = np.asarray(image, dtype=np.float64)
    text_arr = np.asarray(text, dtype=np.float64)
    image_seq = _as_sequence(image_arr, model.dim_image, "image")
    text_seq = _as_sequence(text_arr, model.dim_text, "text")
    p = model.params

    if model.strategy is FusionStrategy.CROSS_ATTENTION:
        x_t = text_seq @ p["W_txt"] + p["b_txt"]
        x_p = image_seq @ p["W_img"] + p["b_img"]
        q = x_t @ p["W_query"]
        k = x_p @ p["W_key"]
        v = x_p @ p["W_value"]
        scores = (q @ k.T) / np.sqrt(model.shared_dim)
        attn = _softmax(scores)
        attended = attn @ v
        pre_norm = attended.mean(axis=0)
        output, norm = _normalize(pre_norm)
        return _Forward(
            image_seq, text_seq, image_arr.ndim == 1, text_arr.ndim == 1,
            None, None, None, None, (x_t, x_p, q, k, v, attn), None,
            pre_norm, norm, output,
        )

    pooled_image = image_seq.mean(axis=0)
    pooled_text = text_seq.mean(axis=0)
    proj_image = pooled_image @ p["W_img"] + p["b_img"]
    proj_text = pooled_text @ p["W_txt"] + p["b_txt"]

    if model.strategy is FusionStrategy.CONCAT:
        pre_norm = np.concatenate([proj_image, proj_text])
        gate = None
    elif model.strategy is FusionStrategy.WEIGHTED_TEXT:
        pre_norm = np.concatenate([proj_image, float(p["text_weight"]) * proj_text])
        gate = None
    elif model.strategy is FusionStrategy.GATED:
        z = np.concatenate([proj_image, proj_text])
        pre_act = z @ p["gate_W1"] + p["gate_b1"]
        hidden = np.maximum(0.0, pre_act)
        logits = hidden @ p["gate_W2"] + p["gate_b2"]
        weights = _softmax(logits)  # (w_text, w_image)
        pre_norm = weights[0] * proj_text + weights[1] * proj_image
        gate = (z, pre_act, hidden, logits, weights)
    else:  # pragma: no cover - enum is closed
        raise StrategyMismatchError(f"unknown strategy {model.strategy!r}")

    output, norm = _normalize(pre_norm)
    return _Forward(
        image_seq, text_seq, image_arr.ndim == 1, text_arr.ndim == 1,
        pooled_image, pooled_text, proj_image, proj_text, None, gate,
        pre_norm, norm, output,
    )


def fuse(model: FusionModel, image: NDArray, text: NDArray) -> NDArray[np.float64]:
    """Fuse one image (vector or patch sequence) with one text token sequence.

    Returns a unit vector of width output_dim(model).
    """
    return _forward(model, image, text).output


def gate_weights(model: FusionModel, image: NDArray, text: NDArray) -> tuple[float, float]:
    """(text_weight, image_weight) of the gate; they sum to 1."""
    if model.strategy is not FusionStrategy.GATED:
        raise StrategyMismatchError("gate_weights needs a GATED model")
    state = _forward(model, image, text)
    assert state.gate is not None
    weights = state.gate[4]
    return float(weights[0]), float(weights[1])


def attention_weights(model: FusionModel, image: NDArray, text: NDArray) -> np.ndarray:
    """Row-stochastic (n_tokens, n_patches) attention matrix."""
    if model.strategy is not FusionStrategy.CROSS_ATTENTION:
        raise StrategyMismatchError("attention_weights needs a CROSS_ATTENTION model")
    state = _forward(model, image, text)
    assert state.attn_inputs is not None
    return state.attn_inputs[5].copy()


# --------------------------------------------------------------------------
# backward


def fuse_backward(
    model: FusionModel,
    image: NDArray,
    text: NDArray,
    upstream: NDArray,
) -> tuple[dict[str, NDArray[np.float64]], NDArray[np.float64], NDArray[np.float64]]:
    """Backpropagate an upstream gradient through fuse.

    Returns (param_grads, image_grad, text_grad); input grads match the
    shapes the caller passed in (1-d stays 1-d).
    """
    state = _forward(model, image, text)
    g_y = np.asarray(upstream, dtype=np.float64)
    if g_y.shape != state.output.shape:
        raise ShapeMismatchError(
            f"upstream shape {g_y.shape}, output shape {state.output.shape}"
        )
    p = model.params
    grads: dict[str, NDArray[np.float64]] = {
        name: np.zeros_like(np.asarray(p[name], dtype=np.float64))
        for name in param_order(model.strategy)
    }

    # normalization Jacobian: y = u / |u|
    y = state.output
    g_u = (g_y - y * float(np.dot(y, g_y))) / state.norm

    if model.strategy is FusionStrategy.CROSS_ATTENTION:
        x_t, x_p, q, k, v, attn = state.attn_inputs  # type: ignore[misc]
        n_tokens = x_t.shape[0]
        scale = 1.0 / np.sqrt(model.shared_dim)

        g_attended = np.broadcast_to(g_u / n_tokens, (n_tokens, g_u.shape[0]))
        g_attn = g_attended @ v.T
        g_v = attn.T @ g_attended
        # softmax rows: dS = A * (dA - sum(dA * A, rows))
        row_dot = np.sum(g_attn * attn, axis=1, keepdims=True)
        g_scores = attn * (g_attn - row_dot)
        g_q = scale * (g_scores @ k)
        g_k = scale * (g_scores.T @ q)

        grads["W_query"] = x_t.T @ g_q
        grads["W_key"] = x_p.T @ g_k
        grads["W_value"] = x_p.T @ g_v
        g_x_t = g_q @ p["W_query"].T
        g_x_p = g_k @ p["W_key"].T + g_v @ p["W_value"].T

        grads["W_txt"] = state.text_seq.T @ g_x_t
        grads["b_txt"] = g_x_t.sum(axis=0)
        grads["W_img"] = state.image_seq.T @ g_x_p
        grads["b_img"] = g_x_p.sum(axis=0)
        g_text = g_x_t @ p["W_txt"].T
        g_image = g_x_p @ p["W_img"].T
    else:
        d_s = model.shared_dim
        if model.strategy is FusionStrategy.CONCAT:
            g_proj_image = g_u[:d_s].copy()
            g_proj_text = g_u[d_s:].copy()
        elif model.strategy is FusionStrategy.WEIGHTED_TEXT:
            g_proj_image = g_u[:d_s].copy()
            half = g_u[d_s:]
            grads["text_weight"] = np.array(
                np.dot(half, state.proj_text), dtype=np.float64
            )
            g_proj_text = float(p["text_weight"]) * half
        else:  # GATED
            z, pre_act, hidden, _, weights = state.gate  # type: ignore[misc]
            g_proj_text = weights[0] * g_u
            g_proj_image = weights[1] * g_u
            g_weights = np.array(
                [np.dot(g_u, state.proj_text), np.dot(g_u, state.proj_image)]
            )
            g_logits = weights * (g_weights - float(np.dot(g_weights, weights)))
            grads["gate_W2"] = np.outer(hidden, g_logits)
            grads["gate_b2"] = g_logits
            g_hidden = g_logits @ p["gate_W2"].T
            g_pre_act = g_hidden * (pre_act > 0.0)
            grads["gate_W1"] = np.outer(z, g_pre_act)
            grads["gate_b1"] = g_pre_act
            g_z = g_pre_act @ p["gate_W1"].T
            g_proj_image = g_proj_image + g_z[:d_s]
            g_proj_text = g_proj_text + g_z[d_s:]

        grads["W_img"] = np.outer(state.pooled_image, g_proj_image)
        grads["b_img"] = g_proj_image
        grads["W_txt"] = np.outer(state.pooled_text, g_proj_text)
        grads["b_txt"] = g_proj_text
        # mean-pool backward: every row shares the pooled gradient
        n_img = state.image_seq.shape[0]
        n_txt = state.text_seq.shape[0]
        g_image = np.broadcast_to(
            (g_proj_image @ p["W_img"].T) / n_img, state.image_seq.shape
        ).copy()
        g_text = np.broadcast_to(
            (g_proj_text @ p["W_txt"].T) / n_txt, state.text_seq.shape
        ).copy()

    if state.image_was_1d:
        g_image = g_image[0]
    if state.text_was_1d:
        g_text = g_text[0]
    return grads, np.asarray(g_image), np.asarray(g_text)


# --------------------------------------------------------------------------
# checkpoints (see FORMATS.md: sidecar JSON + raw little-endian float64)


def save_checkpoint(model: FusionModel, path: str | os.PathLike[str]) -> None:
    order = param_order(model.strategy)
    payload = b"".join(
        np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
        for name in order
    )
    sidecar = {
        "format": "pvem-fusion-checkpoint",
        "version": 1,
        "strategy": model.strategy.value,
        "dim_image": model.dim_image,
        "dim_text": model.dim_text,
        "shared_dim": model.shared_dim,
        "dtype": "<f8",
        "params": [
            {"name": name, "shape": list(np.asarray(model.params[name]).shape)}
            for name in order
        ],
    }
    store.write_bytes_atomic(path, payload)
    store.write_json(str(path) + ".json", sidecar)


def load_checkpoint(path: str | os.PathLike[str]) -> FusionModel:
    sidecar = store.read_json(str(path) + ".json")
    try:
        strategy = FusionStrategy(sidecar["strategy"])
    except ValueError as exc:
        raise StrategyMismatchError(
            f"unknown strategy {sidecar.get('strategy')!r} in checkpoint"
        ) from exc
    dim_image = int(sidecar["dim_image"])
    dim_text = int(sidecar["dim_text"])
    shared_dim = int(sidecar["shared_dim"])

    expected = param_shapes(strategy, dim_image, dim_text, shared_dim)
    declared = [(entry["name"], tuple(entry["shape"])) for entry in sidecar["params"]]
    if [name for name, _ in declared] != list(param_order(strategy)):
        raise ShapeMismatchError("checkpoint parameter order does not match strategy")
    for name, shape in declared:
        if shape != expected[name]:
            raise ShapeMismatchError(
                f"checkpoint param {name}: shape {shape}, expected {expected[name]}"
            )

    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StoreIOError(f"cannot read checkpoint payload {path}: {exc}") from exc
    payload = np.frombuffer(raw, dtype="<f8")
    total = sum(int(np.prod(shape)) for _, shape in declared)
    if payload.size != total:
        raise ShapeMismatchError(
            f"checkpoint payload holds {payload.size} floats, expected {total}"
        )
    params: dict[str, NDArray[np.float64]] = {}
    offset = 0
    for name, shape in declared:
        count = int(np.prod(shape))
        params[name] = payload[offset : offset + count].reshape(shape).copy()
        offset += count
    return FusionModel(strategy, dim_image, dim_text, shared_dim, params)
