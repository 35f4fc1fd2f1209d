"""Screen-space projection of 3D Gaussians and per-pixel alpha compositing.

The rasteriser is a plain per-splat loop over cropped pixel windows: splats
are depth-sorted (stable, tie-broken by a canonical splat id), each one
multiplies the per-pixel transmittance it sees and deposits
``color * alpha * transmittance``.  The reverse pass walks the same splats
back-to-front, maintaining the color accumulated *behind* the current splat,
which yields the exact adjoint of the forward compositing without any tape
node per splat.  Finite-difference tests pin that adjoint down.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .errors import InputError

# 3D-GS rasteriser conventions: a small isotropic dilation keeps projected
# covariances invertible, alpha saturates just below 1, and contributions
# below one 8-bit step are dropped.
DILATION = 0.3
NEAR_PLANE = 0.01
ALPHA_CLIP = 0.999
ALPHA_MIN = 1.0 / 255.0
CULL_SIGMA = 3.0      # projection-time cull: 3-sigma footprint misses the image
SUPPORT_SIGMA = 3.5   # rasteriser crop: wide enough that crop edges fall below ALPHA_MIN
DET_MIN = 1e-12


@dataclass
class Camera:
    """Pinhole camera; ``x_cam = rotation @ x_world + translation``."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.width < 1 or self.height < 1:
            raise InputError("image dimensions must be positive")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise InputError("focal lengths must be positive")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-9:
            raise InputError("camera rotation must be orthonormal")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def translated(self, v) -> "Camera":
        """The same camera after translating the whole world by ``v``."""
        v = np.asarray(v, dtype=np.float64)
        return Camera(self.width, self.height, self.fx, self.fy, self.cx, self.cy,
                      self.rotation.copy(), self.translation - self.rotation @ v)

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fx: float, fy: float,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        """Camera at ``eye`` with +z pointing at ``target`` and +y down-image."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - eye
        norm = np.linalg.norm(forward)
        if norm == 0.0:
            raise InputError("camera eye and target coincide")
        forward = forward / norm
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            # looking straight along up; pick any perpendicular right axis
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
            rnorm = np.linalg.norm(right)
        right = right / rnorm
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(width=width, height=height, fx=fx, fy=fy,
                   cx=width / 2.0, cy=height / 2.0,
                   rotation=rot, translation=-rot @ eye)


@dataclass
class Splat2D:
    mean2d: np.ndarray   # (2,) pixels
    cov2d: np.ndarray    # (2, 2) symmetric positive definite
    depth: float         # camera-space z
    opacity: float
    color: np.ndarray    # (3,)
    splat_id: int = 0    # canonical id; the depth-sort tie-break

    def __post_init__(self):
        self.mean2d = np.asarray(self.mean2d, dtype=np.float64)
        self.cov2d = np.asarray(self.cov2d, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.depth <= 0.0:
            raise InputError("splat depth must be positive")
        a, b, c = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        if a + c <= 0.0 or a * c - b * b <= 0.0:
            raise InputError("cov2d must be positive definite")


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion; rejects the zero quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise InputError("zero quaternion has no rotation")
    w, x, y, z = q / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def build_covariance_3d(q, s) -> np.ndarray:
    """World covariance R(q) diag(s)^2 R(q)^T of an anisotropic Gaussian."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise InputError("scales must be strictly positive")
    rot = quaternion_to_rotation(q)
    return rot @ np.diag(s * s) @ rot.T


def project_gaussian(primitive, camera: Camera, dilation: float = DILATION,
                     near: float = NEAR_PLANE, splat_id: int = 0):
    """Project one Gaussian into screen space; returns None when culled.

    Culling (a normal outcome, not an error) happens when the camera-space
    depth is at or behind the near plane, or when the 3-sigma footprint of
    the projected covariance misses the image entirely.
    """
    mean_cam = camera.rotation @ primitive.position + camera.translation
    x, y, z = mean_cam
    if z <= near:
        return None

    mean2d = np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])
    jac = np.array([
        [camera.fx / z, 0.0, -camera.fx * x / (z * z)],
        [0.0, camera.fy / z, -camera.fy * y / (z * z)],
    ])
    cov3d = build_covariance_3d(primitive.rotation, primitive.scale)
    m = jac @ camera.rotation
    cov2d = m @ cov3d @ m.T + dilation * np.eye(2)

    # 3-sigma screen footprint against the image rectangle
    eig_max = 0.5 * (cov2d[0, 0] + cov2d[1, 1]) + np.sqrt(
        max(0.25 * (cov2d[0, 0] - cov2d[1, 1]) ** 2 + cov2d[0, 1] ** 2, 0.0))
    radius = CULL_SIGMA * np.sqrt(eig_max)
    if (mean2d[0] + radius < 0.0 or mean2d[0] - radius > camera.width
            or mean2d[1] + radius < 0.0 or mean2d[1] - radius > camera.height):
        return None

    return Splat2D(mean2d=mean2d, cov2d=cov2d, depth=float(z),
                   opacity=float(primitive.opacity), color=primitive.color,
                   splat_id=splat_id)


# ---------------------------------------------------------------------------
# rasterisation kernels
# ---------------------------------------------------------------------------


@dataclass
class RenderStats:
    weight_sum: np.ndarray         # (H, W) total blending weight incl. background
    transmittance: np.ndarray      # (H, W) final transmittance
    skipped_singular: int = 0      # splats dropped for non-invertible cov2d
    drawn: int = 0


def _crop_bounds(mx, my, radius, width, height):
    x0 = max(0, int(np.ceil(mx - 0.5 - radius)))
    x1 = min(width - 1, int(np.floor(mx - 0.5 + radius)))
    y0 = max(0, int(np.ceil(my - 0.5 - radius)))
    y1 = min(height - 1, int(np.floor(my - 0.5 + radius)))
    return x0, x1, y0, y1


def _rasterize_forward(mx, my, cov_a, cov_b, cov_c, opacity, colors, order,
                       width, height, background, save: bool):
    """Front-to-back compositing.  Returns (image, T_final, weight_sum, saved, skipped).

    ``saved`` (when requested) holds everything the adjoint needs per drawn
    splat, in draw order: original index, crop window, masked alpha, the
    clip mask, entry transmittance, pixel deltas and the conic/cov entries.
    """
    image = np.zeros((height, width, 3))
    transmittance = np.ones((height, width))
    weight_sum = np.zeros((height, width))
    saved = [] if save else None
    skipped = 0

    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5

    for j in order:
        a, b, c = cov_a[j], cov_b[j], cov_c[j]
        det = a * c - b * b
        if not np.isfinite(det) or det <= DET_MIN or a <= 0.0 or c <= 0.0:
            skipped += 1
            continue
        conic_a, conic_b, conic_c = c / det, -b / det, a / det

        eig_max = 0.5 * (a + c) + np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
        radius = SUPPORT_SIGMA * np.sqrt(eig_max)
        x0, x1, y0, y1 = _crop_bounds(mx[j], my[j], radius, width, height)
        if x0 > x1 or y0 > y1:
            continue

        dx = xs[x0:x1 + 1] - mx[j]
        dy = ys[y0:y1 + 1] - my[j]
        power = -0.5 * (conic_a * dx[None, :] ** 2 + conic_c * dy[:, None] ** 2) \
            - conic_b * dy[:, None] * dx[None, :]
        alpha_raw = opacity[j] * np.exp(power)
        clipped = alpha_raw > ALPHA_CLIP
        alpha = np.where(alpha_raw >= ALPHA_MIN, np.minimum(alpha_raw, ALPHA_CLIP), 0.0)
        if not np.any(alpha > 0.0):
            continue

        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        t_before = transmittance[sl].copy()
        w = alpha * t_before
        image[sl] += w[:, :, None] * colors[j]
        weight_sum[sl] += w
        transmittance[sl] = t_before * (1.0 - alpha)

        if save:
            saved.append((j, sl, alpha, clipped, t_before, dx, dy,
                          (conic_a, conic_b, conic_c), (a, b, c), det))

    image += transmittance[:, :, None] * background
    weight_sum = weight_sum + transmittance
    return image, transmittance, weight_sum, saved, skipped


def _rasterize_backward(saved, transmittance, grad_image, background, n_splats,
                        opacity, colors):
    """Adjoint of ``_rasterize_forward`` for the drawn splats.

    Walks splats back-to-front keeping ``after``: the color each pixel
    accumulates strictly behind the current splat (background included),
    which is exactly what the alpha gradient needs.
    """
    g_mx = np.zeros(n_splats)
    g_my = np.zeros(n_splats)
    g_ca = np.zeros(n_splats)
    g_cb = np.zeros(n_splats)
    g_cc = np.zeros(n_splats)
    g_op = np.zeros(n_splats)
    g_col = np.zeros((n_splats, 3))

    after = transmittance[:, :, None] * background

    for j, sl, alpha, clipped, t_before, dx, dy, conic, cov, det in reversed(saved):
        g_crop = grad_image[sl]
        active = alpha > 0.0
        w = alpha * t_before

        g_col[j] += np.einsum("hw,hwc->c", w, g_crop)

        color = colors[j]
        d_alpha = t_before * (g_crop @ color) \
            - np.einsum("hwc,hwc->hw", g_crop, after[sl]) / (1.0 - alpha)
        d_alpha = np.where(active & ~clipped, d_alpha, 0.0)

        # alpha = opacity * exp(power); exp(power) recovered as alpha/opacity
        exp_power = alpha / opacity[j]
        g_op[j] += np.sum(exp_power * d_alpha)
        g_power = alpha * d_alpha

        dxm = dx[None, :]
        dym = dy[:, None]
        ca, cb, cc = conic
        g_conic_a = np.sum(-0.5 * dxm ** 2 * g_power)
        g_conic_b = np.sum(-dxm * dym * g_power)
        g_conic_c = np.sum(-0.5 * dym ** 2 * g_power)
        g_dx = np.sum(-(ca * dxm + cb * dym) * g_power, axis=0)
        g_dy = np.sum(-(cb * dxm + cc * dym) * g_power, axis=1)
        g_mx[j] += -np.sum(g_dx)
        g_my[j] += -np.sum(g_dy)

        # conic = inverse of [[a, b], [b, c]]; chain through the 2x2 inverse
        a, b, c = cov
        det2 = det * det
        g_ca[j] += (-c * c * g_conic_a + b * c * g_conic_b - b * b * g_conic_c) / det2
        g_cb[j] += (2 * b * c * g_conic_a - (det + 2 * b * b) * g_conic_b
                    + 2 * a * b * g_conic_c) / det2
        g_cc[j] += (-b * b * g_conic_a + a * b * g_conic_b - a * a * g_conic_c) / det2

        after[sl] = after[sl] + w[:, :, None] * color

    return g_mx, g_my, g_ca, g_cb, g_cc, g_op, g_col


def _as_splat_arrays(splats):
    mx = np.array([s.mean2d[0] for s in splats])
    my = np.array([s.mean2d[1] for s in splats])
    cov_a = np.array([s.cov2d[0, 0] for s in splats])
    cov_b = np.array([0.5 * (s.cov2d[0, 1] + s.cov2d[1, 0]) for s in splats])
    cov_c = np.array([s.cov2d[1, 1] for s in splats])
    opacity = np.array([s.opacity for s in splats])
    colors = np.array([s.color for s in splats])
    depths = np.array([s.depth for s in splats])
    ids = np.array([s.splat_id for s in splats])
    return mx, my, cov_a, cov_b, cov_c, opacity, colors, depths, ids


def render(splats, camera: Camera, background, return_stats: bool = False):
    """Composite splats over a background; the blending weights of the splats
    plus the background weight sum to one at every pixel."""
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (3,):
        raise InputError("background must be an RGB 3-vector")
    h, w = camera.height, camera.width

    if not splats:
        image = np.tile(background, (h, w, 1))
        if return_stats:
            return image, RenderStats(weight_sum=np.ones((h, w)),
                                      transmittance=np.ones((h, w)))
        return image

    mx, my, ca, cb, cc, opacity, colors, depths, ids = _as_splat_arrays(splats)
    if not (np.all(np.isfinite(mx)) and np.all(np.isfinite(my))
            and np.all(np.isfinite(colors)) and np.all(np.isfinite(opacity))):
        raise InputError("splats must be finite")
    if np.any(depths <= 0.0):
        raise InputError("splat depths must be positive")

    order = np.lexsort((ids, depths))
    image, transmittance, weight_sum, _, skipped = _rasterize_forward(
        mx, my, ca, cb, cc, opacity, colors, order, w, h, background, save=False)
    if return_stats:
        return image, RenderStats(weight_sum=weight_sum, transmittance=transmittance,
                                  skipped_singular=skipped, drawn=len(splats) - skipped)
    return image


def rasterize_t(mx, my, cov_a, cov_b, cov_c, opacity, colors, depths: np.ndarray,
                ids: np.ndarray, width: int, height: int, background: np.ndarray) -> ad.Tensor:
    """Tape op wrapping the rasteriser; inputs are (S,) tensors plus constants."""
    background = np.asarray(background, dtype=np.float64)
    order = np.lexsort((ids, depths))
    n = depths.shape[0]

    image, transmittance, _, saved, _ = _rasterize_forward(
        mx.value, my.value, cov_a.value, cov_b.value, cov_c.value,
        opacity.value, colors.value, order, width, height, background, save=True)

    def vjp(g):
        return _rasterize_backward(saved, transmittance, g, background, n,
                                   opacity.value, colors.value)

    parents = (mx, my, cov_a, cov_b, cov_c, opacity, colors)
    out = ad.Tensor(image, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    return out


def project_batch_t(positions, quats, scales, camera: Camera,
                    dilation: float = DILATION, near: float = NEAR_PLANE):
    """Tape twin of ``project_gaussian`` over (S, ...) tensors.

    Depth culling subsets the graph with a gather; footprint culling is left
    to the rasteriser, which simply never draws off-screen crops.  Returns
    None when every splat is behind the near plane.
    """
    rot = camera.rotation
    tr = camera.translation
    px, py, pz = positions[:, 0], positions[:, 1], positions[:, 2]
    xc = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + tr[0]
    yc = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + tr[1]
    zc = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + tr[2]

    keep = np.where(zc.value > near)[0]
    if keep.size == 0:
        return None
    xc, yc, zc = ad.index_select(xc, keep), ad.index_select(yc, keep), ad.index_select(zc, keep)
    quats = ad.index_select(quats, keep)
    scales = ad.index_select(scales, keep)

    inv_z = 1.0 / zc
    mean_x = camera.fx * xc * inv_z + camera.cx
    mean_y = camera.fy * yc * inv_z + camera.cy

    # rows of J @ W, expanded componentwise
    j00 = camera.fx * inv_z
    j02 = -camera.fx * xc * inv_z * inv_z
    j11 = camera.fy * inv_z
    j12 = -camera.fy * yc * inv_z * inv_z
    m0 = [j00 * rot[0, k] + j02 * rot[2, k] for k in range(3)]
    m1 = [j11 * rot[1, k] + j12 * rot[2, k] for k in range(3)]

    qw, qx, qy, qz = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    r = [[1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
         [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
         [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)]]
    s2 = [scales[:, k] * scales[:, k] for k in range(3)]

    def sigma(u, v):
        return s2[0] * r[u][0] * r[v][0] + s2[1] * r[u][1] * r[v][1] + s2[2] * r[u][2] * r[v][2]

    s00, s01, s02 = sigma(0, 0), sigma(0, 1), sigma(0, 2)
    s11, s12, s22 = sigma(1, 1), sigma(1, 2), sigma(2, 2)

    t0 = [m0[0] * s00 + m0[1] * s01 + m0[2] * s02,
          m0[0] * s01 + m0[1] * s11 + m0[2] * s12,
          m0[0] * s02 + m0[1] * s12 + m0[2] * s22]
    cov_a = t0[0] * m0[0] + t0[1] * m0[1] + t0[2] * m0[2] + dilation
    cov_b = t0[0] * m1[0] + t0[1] * m1[1] + t0[2] * m1[2]
    t1 = [m1[0] * s00 + m1[1] * s01 + m1[2] * s02,
          m1[0] * s01 + m1[1] * s11 + m1[2] * s12,
          m1[0] * s02 + m1[1] * s12 + m1[2] * s22]
    cov_c = t1[0] * m1[0] + t1[1] * m1[1] + t1[2] * m1[2] + dilation

    return {
        "mean_x": mean_x, "mean_y": mean_y,
        "cov_a": cov_a, "cov_b": cov_b, "cov_c": cov_c,
        "depths": zc.value.copy(), "kept": keep,
    }
