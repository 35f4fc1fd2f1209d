"""MLP heads: per-anchor texture extractors and the Gaussian attribute head.

Two forward paths exist on purpose.  The plain-numpy functions are the
contract surface (pure, deterministic, easy to test).  The ``*_t`` variants
run the same arithmetic on autodiff tensors for training; tests pin the two
paths to each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InputError, NumericalError

ACTIVATIONS = ("relu", "none")

# Attribute layout per predicted Gaussian in the raw head output:
# opacity logit, 3 color logits, 3 raw scales, 4 raw quaternion components.
VALUES_PER_GAUSSIAN = 11

# Added to the raw quaternion w component before normalisation so the
# normalisation stays well-conditioned when the head output is near zero.
QUAT_W_OFFSET = 1.0


@dataclass
class MLPLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str     # "relu" | "none"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigError("layer weight must be (out, in) with matching bias")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ConfigError("layer parameters must be finite")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class MLPParams:
    layers: list[MLPLayer]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("an MLP needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise ConfigError(
                    f"layer shapes do not chain: {prev.weight.shape} -> {cur.weight.shape}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out


def init_mlp(sizes: list[int], rng: np.random.Generator,
             final_activation: str = "none") -> MLPParams:
    """Uniform fan-in initialisation, zero biases, ReLU between layers."""
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        act = "relu" if i < len(sizes) - 2 else final_activation
        layers.append(MLPLayer(weight=w, bias=np.zeros(fan_out), activation=act))
    return MLPParams(layers=layers)


def init_texture_extractor(feature_dim: int, hidden: int, rng: np.random.Generator) -> MLPParams:
    # Exactly two weight layers: 2D -> hidden -> D.
    return init_mlp([2 * feature_dim, hidden, feature_dim], rng)


def init_attribute_head(input_dim: int, hidden: int, k: int, rng: np.random.Generator) -> MLPParams:
    return init_mlp([input_dim, hidden, hidden, k * VALUES_PER_GAUSSIAN], rng)


def mlp_forward(params: MLPParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ConfigError(f"input length {x.shape[-1]} != expected {params.input_dim}")
    for layer in params.layers:
        x = x @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            x = np.maximum(x, 0.0)
    return x


def mlp_params_t(params: MLPParams) -> list[tuple[ad.Tensor, ad.Tensor, str]]:
    """Lift parameters onto the tape as learnable leaves."""
    return [(ad.parameter(l.weight), ad.parameter(l.bias), l.activation) for l in params.layers]


def mlp_forward_t(layers_t, x: ad.Tensor) -> ad.Tensor:
    for w, b, act in layers_t:
        x = ad.linear(x, w, b)
        if act == "relu":
            x = ad.relu(x)
    return x


@dataclass
class ViewContext:
    """Distance and unit direction from the camera to one anchor."""

    camera_position: np.ndarray  # (3,)
    distance: float
    direction: np.ndarray        # (3,), unit norm

    def __post_init__(self):
        self.camera_position = np.asarray(self.camera_position, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if self.distance < 0.0:
            raise InputError("distance must be non-negative")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise InputError("direction must be unit length")

    @classmethod
    def for_anchor(cls, anchor_position, camera_position) -> "ViewContext":
        anchor_position = np.asarray(anchor_position, dtype=np.float64)
        camera_position = np.asarray(camera_position, dtype=np.float64)
        delta = anchor_position - camera_position
        dist = float(np.linalg.norm(delta))
        if dist == 0.0:
            raise InputError("anchor coincides with the camera position")
        return cls(camera_position=camera_position, distance=dist, direction=delta / dist)


@dataclass
class GaussianPrimitive:
    position: np.ndarray  # (3,)
    opacity: float        # in [0, 1]
    color: np.ndarray     # (3,) in [0, 1]
    scale: np.ndarray     # (3,), non-negative
    rotation: np.ndarray  # (4,) unit quaternion, w first

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if not 0.0 <= self.opacity <= 1.0:
            raise InputError(f"opacity must be in [0, 1], got {self.opacity}")
        if np.any(self.scale < 0.0):
            raise InputError("scale components must be non-negative")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise InputError("rotation must be a unit quaternion")


def head_input_dim(feature_dim: int, m: int) -> int:
    """Feature, m texture vectors, distance scalar, direction 3-vector."""
    return (m + 1) * feature_dim + 4


def _squash_raw(raw_k: np.ndarray, scaling: np.ndarray, quat_w_offset: float):
    """Map one Gaussian's 11 raw values to (opacity, color, scale, quaternion)."""
    opacity = 1.0 / (1.0 + np.exp(-raw_k[0]))
    color = 1.0 / (1.0 + np.exp(-raw_k[1:4]))
    scale = np.logaddexp(0.0, raw_k[4:7]) * scaling
    q = raw_k[7:11].copy()
    q[0] += quat_w_offset
    q = q / np.linalg.norm(q)
    return opacity, color, scale, q


def predict_gaussians(anchor, aug, view: ViewContext, head: MLPParams,
                      quat_w_offset: float = QUAT_W_OFFSET,
                      anchor_index: int = 0) -> list[GaussianPrimitive]:
    """Predict the anchor's K Gaussians for one view.

    ``aug`` may be None for the plain configuration (no texture vectors).
    Positions come from the anchor geometry alone: position + offset * scaling
    per component, independent of the head output.
    """
    feature = np.asarray(anchor.feature, dtype=np.float64)
    parts = [feature]
    if aug is not None:
        parts.extend(aug.textures[i] for i in range(aug.m))
    parts.append(np.array([view.distance]))
    parts.append(view.direction)
    x = np.concatenate(parts)
    if x.shape[0] != head.input_dim:
        raise ConfigError(
            f"head expects input {head.input_dim}, assembled {x.shape[0]} "
            f"(feature_dim={feature.shape[0]}, m={0 if aug is None else aug.m})")

    raw = mlp_forward(head, x)
    k = np.asarray(anchor.offsets).shape[0]
    if raw.shape[0] != k * VALUES_PER_GAUSSIAN:
        raise ConfigError(
            f"head emits {raw.shape[0]} values, need {k}*{VALUES_PER_GAUSSIAN}")
    if not np.all(np.isfinite(raw)):
        raise NumericalError(f"non-finite head output for anchor {anchor_index}")

    positions = anchor.position + anchor.offsets * anchor.scaling
    out = []
    for j in range(k):
        raw_k = raw[j * VALUES_PER_GAUSSIAN:(j + 1) * VALUES_PER_GAUSSIAN]
        opacity, color, scale, q = _squash_raw(raw_k, anchor.scaling, quat_w_offset)
        out.append(GaussianPrimitive(position=positions[j], opacity=float(opacity),
                                     color=color, scale=scale, rotation=q))
    return out


@dataclass
class BatchPrediction:
    """Tape tensors for all anchors' Gaussians at once, shape (N, K, ...)."""

    positions: ad.Tensor  # (N, K, 3)
    opacities: ad.Tensor  # (N, K)
    colors: ad.Tensor     # (N, K, 3)
    scales: ad.Tensor     # (N, K, 3)
    quats: ad.Tensor      # (N, K, 4)


def predict_gaussians_batch(features_t: ad.Tensor, textures_t, positions: np.ndarray,
                            scalings_t: ad.Tensor, offsets_t: ad.Tensor,
                            distances: np.ndarray, directions: np.ndarray,
                            head_t, k: int,
                            quat_w_offset: float = QUAT_W_OFFSET) -> BatchPrediction:
    """Vectorised tape twin of ``predict_gaussians`` over all N anchors.

    ``textures_t`` is a list of (N, D) tensors (may be empty), ``head_t`` the
    lifted head parameters, ``distances``/``directions`` per-anchor view
    constants.
    """
    n = features_t.shape[0]
    parts = [features_t]
    parts.extend(textures_t)
    parts.append(ad.constant(distances.reshape(n, 1)))
    parts.append(ad.constant(directions))
    x = ad.concat(parts, axis=1)

    raw = mlp_forward_t(head_t, x)
    if not np.all(np.isfinite(raw.value)):
        bad = int(np.argwhere(~np.isfinite(raw.value))[0][0])
        raise NumericalError(f"non-finite head output for anchor {bad}")
    raw = ad.reshape(raw, (n, k, VALUES_PER_GAUSSIAN))

    opacities = ad.sigmoid(raw[:, :, 0])
    colors = ad.sigmoid(raw[:, :, 1:4])
    scalings_row = ad.reshape(scalings_t, (n, 1, 3))
    scales = ad.softplus(raw[:, :, 4:7]) * scalings_row

    quats = raw[:, :, 7:11] + ad.constant(
        np.broadcast_to(np.array([quat_w_offset, 0.0, 0.0, 0.0]), (n, k, 4)))
    qnorm = ad.sqrt(ad.tsum(quats * quats, axis=2, keepdims=True))
    quats = quats / qnorm

    gauss_pos = ad.constant(positions.reshape(n, 1, 3)) + offsets_t * scalings_row
    return BatchPrediction(positions=gauss_pos, opacities=opacities, colors=colors,
                           scales=scales, quats=quats)
