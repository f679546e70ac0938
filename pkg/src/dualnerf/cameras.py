"""Pinhole camera model shared by the scene generator and the renderer.

Convention: world-to-camera rotation R has rows (right, down, forward), so
image v grows downward and points in front of the camera have positive
depth.  Pixel (row, col) has its center at continuous coordinates
(u, v) = (col + 0.5, row + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def intrinsics(width, height, focal):
    return np.array([[focal, 0.0, width / 2.0],
                     [0.0, focal, height / 2.0],
                     [0.0, 0.0, 1.0]])


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """World-to-camera (R, t) for a camera at ``position`` facing ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValidationError("look_at: camera position coincides with target")
    forward = forward / norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        raise ValidationError("look_at: view direction parallel to up vector")
    right = right / rnorm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    t = -R @ position
    return R, t


@dataclass
class Camera:
    """Posed pinhole camera: x_cam = R @ x_world + t, pixel = K @ x_cam."""

    K: np.ndarray      # 3x3
    R: np.ndarray      # 3x3 world-to-camera
    t: np.ndarray      # 3
    width: int
    height: int

    @property
    def projection(self):
        """3x4 projection matrix K @ [R | t]."""
        return self.K @ np.concatenate([self.R, self.t[:, None]], axis=1)

    @property
    def position(self):
        return -self.R.T @ self.t

    def pixel_rays(self, rows, cols):
        """Unit world-space ray directions through the given pixel centers."""
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        fx, fy = self.K[0, 0], self.K[1, 1]
        cx, cy = self.K[0, 2], self.K[1, 2]
        d_cam = np.stack([(cols + 0.5 - cx) / fx,
                          (rows + 0.5 - cy) / fy,
                          np.ones_like(rows)], axis=-1)
        d_world = d_cam @ self.R  # R^T applied row-wise
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        return d_world

    @classmethod
    def from_projection(cls, P, K, width, height):
        """Recover (R, t) from P = K [R | t] with known intrinsics."""
        Rt = np.linalg.solve(K, P)
        return cls(K=K, R=Rt[:, :3], t=Rt[:, 3], width=width, height=height)
