"""Rigid poses, pinhole rays and depth sampling.

Poses map camera coordinates to world coordinates (``x_world = R x_cam + T``).
Cameras look down their local -z axis with +y up; image rows grow downward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

SCENE_BOUND = 1.0


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_row(cls, row) -> "Pose":
        m = np.asarray(row, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def to_row(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1).reshape(12)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def check(self, tol: float = 1e-6) -> None:
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
            raise ContractError("pose rotation is not orthonormal with det +1")

    def apply(self, x) -> np.ndarray:
        """R x + T for points stacked along the last axis."""
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        self.check()
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Pose that applies ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    @property
    def center(self) -> np.ndarray:
        return self.translation


def pose_invert(p: Pose) -> Pose:
    return p.inverse()


def pose_apply(p: Pose, x) -> np.ndarray:
    return p.apply(x)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def orbit_pose(yaw: float, pitch: float, distance: float) -> Pose:
    """Camera on a sphere around the origin, looking at it."""
    eye = distance * np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
    return look_at(eye)


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ContractError("focal length must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ContractError("principal point outside the image")

    @classmethod
    def default(cls, width: int, height: int | None = None) -> "Intrinsics":
        height = width if height is None else height
        return cls(float(width), width / 2.0, height / 2.0, width, height)

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.focal * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)))


def pixel_centers(k: Intrinsics) -> np.ndarray:
    """(u, v) coordinates of every pixel center, row-major, shape [H*W, 2]."""
    v, u = np.mgrid[0:k.height, 0:k.width]
    return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(np.float64)


@dataclass
class Rays:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])


def cube_bounds(origins: np.ndarray, directions: np.ndarray, bound: float = SCENE_BOUND):
    """Per-ray entry/exit depths through [-bound, bound]^3.

    Rays that miss the cube fall back to the depth range spanned by the
    cube's bounding sphere as seen from the ray origin.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (-bound - origins) * inv
        t1 = (bound - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    tmin = np.maximum(tmin, 1e-3)
    dist = np.linalg.norm(origins, axis=1)
    radius = np.sqrt(3.0) * bound
    miss = ~(tmax > tmin + 1e-6)
    tmin = np.where(miss, np.maximum(dist - radius, 1e-3), tmin)
    tmax = np.where(miss, dist + radius, tmax)
    return tmin, tmax


def generate_rays(p: Pose, k: Intrinsics, pixels) -> Rays:
    """Pinhole rays through continuous pixel coordinates ``(u, v)``."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = px[:, 0], px[:, 1]
    if np.any((u < 0) | (u > k.width) | (v < 0) | (v > k.height)):
        raise ContractError("pixel coordinates outside the image extents")
    d_cam = np.stack([(u - k.cx) / k.focal, -(v - k.cy) / k.focal, -np.ones_like(u)], axis=1)
    d = d_cam @ p.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(p.translation, d.shape).copy()
    near, far = cube_bounds(o, d)
    return Rays(o, d, near, far)


def stratified_sample(r: Rays, n: int, jitter: bool = False, seed: int | np.random.Generator = 0):
    """Depths [R,n] (one per equal-width bin) and points [R,n,3]."""
    if n < 1:
        raise ContractError("need at least one sample per ray")
    edges = np.linspace(0.0, 1.0, n + 1)
    if jitter:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        frac = rng.random((len(r), n))
    else:
        frac = np.full((len(r), n), 0.5)
    unit = edges[:-1] + frac * (edges[1] - edges[0])
    t = r.near[:, None] + (r.far - r.near)[:, None] * unit
    pts = r.origins[:, None, :] + t[..., None] * r.directions[:, None, :]
    return t, pts


def project(p: Pose, k: Intrinsics, x) -> np.ndarray:
    """Image coordinates (u, v) of world points ``x`` [...,3] seen from camera ``p``."""
    q = p.inverse().apply(x)
    depth = -q[..., 2]
    u = k.cx + k.focal * q[..., 0] / depth
    v = k.cy - k.focal * q[..., 1] / depth
    return np.stack([u, v], axis=-1)
