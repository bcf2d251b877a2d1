"""Cameras, rays, and rotation utilities.

Poses are camera-to-world throughout: ``R`` maps camera coordinates into
world coordinates and ``t`` is the camera center. Anything arriving in
world-to-camera convention is converted once at ingestion time. Pixel
``(u, v)`` addresses the pixel whose center sits at ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3)
    return v


@dataclass
class Camera:
    """Pinhole camera with optional radial distortion, pose stored camera-to-world."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = _as_vec3(self.t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err >= 1e-6 or np.linalg.det(self.R) < 0:
            raise ValueError("R is not a proper rotation (orthonormality error %.3g)" % err)

    def pose_matrix(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def replace(self, **kw) -> "Camera":
        return dataclasses.replace(self, **kw)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        self.origin = _as_vec3(self.origin)
        self.direction = _as_vec3(self.direction)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit norm")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")


@dataclass
class AxisAngle:
    axis: np.ndarray
    angle: float

    def __post_init__(self):
        self.axis = _as_vec3(self.axis)
        if not (0.0 <= self.angle <= np.pi + 1e-12):
            raise ValueError("angle must lie in [0, pi]")
        if self.angle > 1e-9 and abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("axis must be unit norm for nonzero angles")


def aa_to_rotation(aa: AxisAngle) -> np.ndarray:
    """Rodrigues formula. A zero angle yields the identity regardless of axis."""
    th = aa.angle
    if th <= 1e-12:
        return np.eye(3)
    k = aa.axis
    K = np.array([[0.0, -k[2], k[1]],
                  [k[2], 0.0, -k[0]],
                  [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)


def rotation_to_aa(R: np.ndarray) -> AxisAngle:
    """Inverse of aa_to_rotation.

    The angle comes from the trace; the axis from the skew part, except near
    pi where the skew part cancels and the axis is recovered from the
    dominant diagonal of (R + I)/2. Near-identity inputs return angle 0 with
    axis (0, 0, 1) by convention.
    """
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    cos_t = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos_t))
    if angle < 1e-9:
        return AxisAngle(np.array([0.0, 0.0, 1.0]), 0.0)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 0.75 * np.pi:
        n = np.linalg.norm(skew)
        if n < 1e-12:
            # symmetric within noise: the angle is an artifact of trace rounding
            return AxisAngle(np.array([0.0, 0.0, 1.0]), 0.0)
        return AxisAngle(skew / n, angle)
    # large angles: the skew part degrades as sin(angle) -> 0, but the
    # symmetric part (R + R^T)/2 = cos*I + (1-cos) vv^T stays well conditioned
    outer = ((R + R.T) / 2.0 - cos_t * np.eye(3)) / (1.0 - cos_t)
    d = np.clip(np.diag(outer), 0.0, None)
    j = int(np.argmax(d))
    axis = outer[:, j] / np.sqrt(max(d[j], 1e-300))
    axis = axis / np.linalg.norm(axis)
    # overall sign from the skew part; at exactly pi both signs are
    # equivalent, so pick a deterministic one
    if np.linalg.norm(skew) > 1e-12:
        if np.dot(axis, skew) < 0:
            axis = -axis
    elif axis[int(np.argmax(np.abs(axis)))] < 0:
        axis = -axis
    return AxisAngle(axis, angle)


def rotation_distance(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in [0, pi]."""
    tr = float(np.trace(np.asarray(R2).T @ np.asarray(R1)))
    return float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def translation_distance(t1, t2) -> float:
    """Squared Euclidean distance between two translations.

    The square is intentional: pose-sampling thresholds are compared against
    this squared value.
    """
    d = _as_vec3(t2) - _as_vec3(t1)
    return float(d @ d)


def reduce_angle(R: np.ndarray, s: float) -> np.ndarray:
    """Scale the rotation angle of R by s in [0, 1], keeping the axis."""
    aa = rotation_to_aa(R)
    return aa_to_rotation(AxisAngle(aa.axis, s * aa.angle))


def intermediate_rotation(R1: np.ndarray, R2: np.ndarray, s: float) -> np.ndarray:
    """Geodesic interpolation from R1 (s=0) to R2 (s=1)."""
    return reduce_angle(np.asarray(R2) @ np.asarray(R1).T, s) @ np.asarray(R1)


def pixel_to_ray(cam: Camera, u: float, v: float) -> Ray:
    """Ray through pixel center (u+0.5, v+0.5) with forward-applied distortion."""
    if not (np.isfinite(u) and np.isfinite(v)):
        raise ValueError("pixel coordinates must be finite")
    x = (u + 0.5 - cam.cx) / cam.fx
    y = (v + 0.5 - cam.cy) / cam.fy
    r2 = x * x + y * y
    f = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    d = cam.R @ np.array([x * f, y * f, 1.0])
    d = d / np.linalg.norm(d)
    return Ray(cam.t.copy(), d)


def camera_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel, row-major (v * width + u).

    Vectorized counterpart of pixel_to_ray over the full image plane.
    """
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    x = (uu + 0.5 - cam.cx) / cam.fx
    y = (vv + 0.5 - cam.cy) / cam.fy
    r2 = x * x + y * y
    f = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    dirs = np.stack([x * f, y * f, np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs = dirs @ cam.R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.t, dirs.shape).copy()
    return origins, dirs


def look_at_camera(position, target, up, fx, fy, cx, cy, width, height,
                   k1=0.0, k2=0.0) -> Camera:
    """Camera at `position` looking at `target`.

    Follows the x-right / y-down / z-forward camera frame used by
    pixel_to_ray.
    """
    pos = _as_vec3(position)
    fwd = _as_vec3(target) - pos
    fwd = fwd / np.linalg.norm(fwd)
    upv = _as_vec3(up)
    right = np.cross(fwd, upv)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  R=R, t=pos, k1=k1, k2=k2)
