"""Keypoint container shared by the simulator and the matchers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Keypoints:
    """Column-oriented keypoint set of one image.

    uv: (N,2) pixel coordinates; desc: (N,D) unit descriptors; orient: (N,)
    angles in [0, 2pi); landmark_id: (N,) ground-truth provenance, -1 for
    clutter (only populated by the simulator).
    """

    uv: np.ndarray
    desc: np.ndarray
    orient: np.ndarray
    landmark_id: np.ndarray

    def __len__(self):
        return len(self.uv)

    def rotated(self, angle_rad, width, height) -> "Keypoints":
        """Copy with pixels rotated about the image center and the angle added
        to keypoint orientations (models feeding a rotated image to a matcher)."""
        c, s = np.cos(angle_rad), np.sin(angle_rad)
        ctr = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        d = self.uv - ctr
        uv = np.column_stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1]]) + ctr
        return Keypoints(uv, self.desc, np.mod(self.orient + angle_rad, 2 * np.pi),
                         self.landmark_id)

    def to_dict(self):
        return {
            "uv": np.round(self.uv, 4).tolist(),
            "desc": np.round(self.desc, 6).tolist(),
            "orient": np.round(self.orient, 6).tolist(),
            "landmark_id": self.landmark_id.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["uv"], dtype=float).reshape(-1, 2),
            np.asarray(d["desc"], dtype=float),
            np.asarray(d["orient"], dtype=float),
            np.asarray(d["landmark_id"], dtype=np.int64),
        )
