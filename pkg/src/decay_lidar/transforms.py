"""Rigid-body poses with unit quaternions stored as (w, x, y, z)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


def _to_scipy(q):
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(q[..., [1, 2, 3, 0]])


def _from_scipy(rot: Rotation) -> np.ndarray:
    q = rot.as_quat()
    return np.ascontiguousarray(q[..., [3, 0, 1, 2]])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product of (w, x, y, z) quaternions, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_from_rotvec(v) -> np.ndarray:
    return _from_scipy(Rotation.from_rotvec(np.asarray(v, dtype=np.float64)))


def quat_to_matrix(q) -> np.ndarray:
    return _to_scipy(q).as_matrix()


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([np.cos(yaw / 2.0), 0.0, 0.0, np.sin(yaw / 2.0)])


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def weighted_quat_mean(quats, weights) -> np.ndarray:
    """Weighted mean rotation as the principal eigenvector of sum w q q^T.

    Quaternions are sign-aligned to the first one beforehand so that q and -q
    (the same rotation) do not cancel in the outer-product sum.
    """
    quats = np.asarray(quats, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    signs = np.where(quats @ quats[0] < 0.0, -1.0, 1.0)
    aligned = quats * signs[:, None]
    m = (aligned * w[:, None]).T @ aligned
    _, vecs = np.linalg.eigh(m)
    q = vecs[:, -1]
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class Pose:
    """Sensor or robot pose in the map frame."""

    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be nonzero and finite")
        if abs(n - 1.0) > 1e-9:
            q = q / n
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "quaternion", q)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw: float = 0.0) -> Pose:
        return cls(np.array([x, y, z], dtype=np.float64), quat_from_yaw(yaw))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def compose(self, other: Pose) -> Pose:
        """Return self * other (other expressed in this pose's frame)."""
        p = self.position + self.rotation_matrix @ other.position
        q = normalize_quat(quat_multiply(self.quaternion, other.quaternion))
        return Pose(p, q)

    def inverse(self) -> Pose:
        conj = self.quaternion * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(-(quat_to_matrix(conj) @ self.position), conj)

    def relative_to(self, base: Pose) -> Pose:
        """Delta d such that base.compose(d) == self."""
        return base.inverse().compose(self)

    def transform_points(self, pts) -> np.ndarray:
        return self.rotate(pts) + self.position

    def rotate(self, vecs) -> np.ndarray:
        # explicit row-wise products: results must not depend on batch size
        v = np.asarray(vecs, dtype=np.float64)
        R = self.rotation_matrix
        return v[..., 0:1] * R[:, 0] + v[..., 1:2] * R[:, 1] + v[..., 2:3] * R[:, 2]

    def as_array(self) -> np.ndarray:
        """Seven-vector (x, y, z, qw, qx, qy, qz)."""
        return np.concatenate([self.position, self.quaternion])

    @classmethod
    def from_array(cls, a) -> Pose:
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:3], a[3:7])

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        same_rot = min(np.abs(self.quaternion - other.quaternion).max(),
                       np.abs(self.quaternion + other.quaternion).max()) <= atol
        return bool(np.allclose(self.position, other.position, atol=atol) and same_rot)

    def __repr__(self):
        p = ", ".join(f"{v:.4g}" for v in self.position)
        q = ", ".join(f"{v:.4g}" for v in self.quaternion)
        return f"Pose(position=[{p}], quaternion=[{q}])"
