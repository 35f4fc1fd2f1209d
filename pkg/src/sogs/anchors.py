"""Anchor scene representation and the second-order feature machinery.

Anchors live on a voxel grid derived from an input point cloud.  Each one
carries a learnable feature vector, a positive scaling, and a fixed number of
spatial offsets.  Treating the feature channels as variables and the anchors
as observations, this module builds the global channel statistics: mean,
covariance, correlation, and the leading correlation eigenvectors that drive
per-anchor feature augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError, InputError
from .numerics import EigenPairs, SymMatrix, sym_eigendecomposition

# Channels whose standard deviation falls below this are treated as carrying
# no signal; their correlation rows are zeroed (diagonal kept at 1).
DEGENERATE_STD = 1e-8


@dataclass
class Anchor:
    position: np.ndarray   # (3,)
    feature: np.ndarray    # (D,)
    scaling: np.ndarray    # (3,), strictly positive
    offsets: np.ndarray    # (K, 3)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.feature = np.asarray(self.feature, dtype=np.float64)
        self.scaling = np.asarray(self.scaling, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.position.shape != (3,):
            raise InputError(f"anchor position must be a 3-vector, got {self.position.shape}")
        if self.scaling.shape != (3,) or np.any(self.scaling <= 0.0):
            raise InputError("anchor scaling must be a strictly positive 3-vector")
        if self.offsets.ndim != 2 or self.offsets.shape[1] != 3:
            raise InputError(f"offsets must be (K, 3), got {self.offsets.shape}")


class AnchorField:
    """All anchors of a scene, stored as arrays for vectorised access.

    positions (N, 3), features (N, D), scalings (N, 3), offsets (N, K, 3).
    Single-writer: the trainer mutates features/scalings/offsets in place.
    """

    def __init__(self, positions, features, scalings, offsets):
        self.positions = np.asarray(positions, dtype=np.float64)
        self.features = np.asarray(features, dtype=np.float64)
        self.scalings = np.asarray(scalings, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        n = self.positions.shape[0]
        if n < 1:
            raise InputError("an anchor field needs at least one anchor")
        if self.positions.shape != (n, 3):
            raise InputError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InputError("features must be (N, D)")
        if self.scalings.shape != (n, 3) or np.any(self.scalings <= 0.0):
            raise InputError("scalings must be (N, 3) and strictly positive")
        if self.offsets.ndim != 3 or self.offsets.shape[0] != n or self.offsets.shape[2] != 3:
            raise InputError("offsets must be (N, K, 3)")
        if np.unique(self.positions, axis=0).shape[0] != n:
            raise InputError("anchor positions must be pairwise distinct")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def offsets_per_anchor(self) -> int:
        return self.offsets.shape[1]

    def anchor(self, i: int) -> Anchor:
        return Anchor(self.positions[i], self.features[i], self.scalings[i], self.offsets[i])

    @property
    def anchors(self) -> list[Anchor]:
        return [self.anchor(i) for i in range(len(self))]


def voxelize_points(points, voxel_size: float, feature_dim: int,
                    offsets_per_anchor: int) -> AnchorField:
    """One anchor per occupied voxel of the grid anchored at the origin.

    Anchors sit at voxel centers, sorted by integer voxel index for a stable
    order.  Features start at zero (the trainer randomises them), scalings at
    the voxel size, offsets at zero.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise InputError("cannot voxelize an empty point list")
    if points.ndim != 2 or points.shape[1] != 3:
        raise InputError(f"points must be (P, 3), got {points.shape}")
    if voxel_size <= 0.0:
        raise InputError(f"voxel_size must be positive, got {voxel_size}")

    cells = np.floor(points / voxel_size).astype(np.int64)
    cells = np.unique(cells, axis=0)  # unique also sorts by (ix, iy, iz)
    centers = (cells.astype(np.float64) + 0.5) * voxel_size
    n = centers.shape[0]
    return AnchorField(
        positions=centers,
        features=np.zeros((n, feature_dim)),
        scalings=np.full((n, 3), float(voxel_size)),
        offsets=np.zeros((n, offsets_per_anchor, 3)),
    )


@dataclass(frozen=True)
class FeatureMoments:
    mean: np.ndarray          # (D,)
    covariance: SymMatrix     # (D, D)
    degenerate: bool          # true when only one observation exists


def _exact_symmetrize(a: np.ndarray) -> np.ndarray:
    # Mirror the upper triangle so SymMatrix's exact-symmetry check holds
    # regardless of BLAS rounding asymmetries.
    upper = np.triu(a)
    return upper + upper.T - np.diag(np.diag(a))


def compute_feature_covariance(field: AnchorField) -> FeatureMoments:
    """Channel mean and (N-1)-normalised channel covariance over all anchors."""
    f = field.features
    n = f.shape[0]
    mean = f.mean(axis=0)
    if n == 1:
        d = f.shape[1]
        return FeatureMoments(mean=mean.copy(),
                              covariance=SymMatrix.from_array(np.zeros((d, d))),
                              degenerate=True)
    centered = f - mean
    cov = centered.T @ centered / (n - 1)
    return FeatureMoments(mean=mean, covariance=SymMatrix.from_array(_exact_symmetrize(cov)),
                          degenerate=False)


def covariance_to_correlation(covariance: SymMatrix) -> tuple[SymMatrix, np.ndarray]:
    """Standardise a covariance into a correlation matrix.

    Returns (correlation, per-channel standard deviations).  Channels with
    near-zero variance get a zero row/column and a 1 on the diagonal, which
    keeps the matrix well-formed without dividing by ~0.
    """
    cov = covariance.entries
    diag = np.diag(cov)
    if np.any(diag < 0.0):
        raise InputError("covariance diagonal has negative entries; not a covariance matrix")
    std = np.sqrt(diag)
    ok = std >= DEGENERATE_STD
    denom = np.where(ok, std, 1.0)
    corr = cov / denom[:, None] / denom[None, :]
    corr[~ok, :] = 0.0
    corr[:, ~ok] = 0.0
    np.fill_diagonal(corr, 1.0)
    return SymMatrix.from_array(_exact_symmetrize(corr)), std


def degenerate_channels(std_devs: np.ndarray) -> np.ndarray:
    return np.asarray(std_devs) < DEGENERATE_STD


def principal_covariations(correlation: SymMatrix, m: int) -> tuple[EigenPairs, np.ndarray]:
    """Eigendecompose a correlation matrix and keep the top-m eigenvector columns."""
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    if m > correlation.dim:
        raise ConfigError(f"m={m} exceeds the feature dimension {correlation.dim}")
    eigen = sym_eigendecomposition(correlation)
    return eigen, eigen.vectors[:, :m].copy()


@dataclass(frozen=True)
class SecondOrderBasis:
    """Snapshot of the global feature statistics at one training iteration.

    The principal columns are shared across all anchors and treated as
    constants by the optimiser (no gradient flows back through them).
    """

    mean: np.ndarray          # (D,)
    covariance: SymMatrix
    correlation: SymMatrix
    std_devs: np.ndarray      # (D,)
    eigen: EigenPairs
    principal: np.ndarray     # (D, m)
    m: int
    degenerate: bool = False
    iteration: int = 0

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.m > d:
            raise ConfigError(f"m={self.m} exceeds dimension {d}")
        if self.principal.shape != (d, self.m):
            raise ConfigError(f"principal must be ({d}, {self.m}), got {self.principal.shape}")
        corr = self.correlation.entries
        ok = ~degenerate_channels(self.std_devs)
        if np.any(np.abs(np.diag(corr)[ok] - 1.0) > 1e-9):
            raise InputError("correlation diagonal must be 1 for live channels")
        if np.any(np.abs(corr) > 1.0 + 1e-9):
            raise InputError("correlation entries must lie in [-1, 1]")
        gram = self.principal.T @ self.principal
        if np.max(np.abs(gram - np.eye(self.m))) > 1e-8:
            raise InputError("principal columns must be orthonormal")


def refresh_basis(field: AnchorField, m: int, iteration: int = 0) -> SecondOrderBasis:
    """Recompute the full second-order basis from the current anchor features."""
    moments = compute_feature_covariance(field)
    correlation, std = covariance_to_correlation(moments.covariance)
    eigen, principal = principal_covariations(correlation, m)
    degenerate = moments.degenerate or bool(np.any(degenerate_channels(std)))
    return SecondOrderBasis(
        mean=moments.mean,
        covariance=moments.covariance,
        correlation=correlation,
        std_devs=std,
        eigen=eigen,
        principal=principal,
        m=m,
        degenerate=degenerate,
        iteration=iteration,
    )


@dataclass(frozen=True)
class AugmentedFeatures:
    """The per-anchor texture vectors produced from the shared basis."""

    textures: np.ndarray  # (M, D)

    def __post_init__(self):
        if self.textures.ndim != 2:
            raise InputError("textures must be (M, D)")
        if not np.all(np.isfinite(self.textures)):
            raise InputError("texture features must be finite")

    @property
    def m(self) -> int:
        return self.textures.shape[0]


def augment_anchor(feature: np.ndarray, basis: SecondOrderBasis,
                   extractors) -> AugmentedFeatures:
    """Run each extractor on [principal column, anchor feature].

    Depends only on the anchor's own feature, the shared basis, and the
    extractor parameters; other anchors do not enter.
    """
    from .heads import mlp_forward  # local import avoids a module cycle

    feature = np.asarray(feature, dtype=np.float64)
    d = feature.shape[0]
    if len(extractors) != basis.m:
        raise ConfigError(f"expected {basis.m} extractors, got {len(extractors)}")
    textures = np.empty((basis.m, d))
    for i, extractor in enumerate(extractors):
        x = np.concatenate([basis.principal[:, i], feature])
        if extractor.input_dim != 2 * d:
            raise ConfigError(
                f"extractor {i} expects input {extractor.input_dim}, need {2 * d}")
        out = mlp_forward(extractor, x)
        if out.shape[0] != d:
            raise ConfigError(f"extractor {i} emits {out.shape[0]} values, need {d}")
        textures[i] = out
    return AugmentedFeatures(textures=textures)


def basis_rows(basis: SecondOrderBasis) -> list[tuple[int, str, int, float]]:
    """Flatten a basis into (iteration, quantity, index, value) rows."""
    rows = []
    it = basis.iteration
    for i, v in enumerate(basis.mean):
        rows.append((it, "mean", i, float(v)))
    for i, v in enumerate(np.diag(basis.covariance.entries)):
        rows.append((it, "cov_diag", i, float(v)))
    for i, v in enumerate(basis.eigen.values):
        rows.append((it, "eigenvalue", i, float(v)))
    for j in range(basis.m):
        for i, v in enumerate(basis.principal[:, j]):
            rows.append((it, f"principal_{j}", i, float(v)))
    return rows
