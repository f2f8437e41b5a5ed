"""Per-class semantic region boundaries and nearest-boundary lookup.

For every class present in a frame we record the boundary pixels of its
argmax region (region pixels with a four-connected neighbor of another
label, or on the image border) and a Euclidean distance transform whose
argmin gives the nearest boundary pixel from anywhere in the image.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


class SemanticBoundaryField:
    """Nearest-boundary queries against one frame's segmentation."""

    def __init__(self, sem_probs: np.ndarray):
        sem_probs = np.asarray(sem_probs, dtype=float)
        h, w, c = sem_probs.shape
        self.shape = (h, w)
        self.n_classes = c
        self.labels = np.argmax(sem_probs, axis=2)
        self.present = np.zeros(c, dtype=bool)
        self.boundary_masks = np.zeros((c, h, w), dtype=bool)
        # nearest boundary pixel (v, u) of class k from each pixel
        self._nearest = np.zeros((c, 2, h, w), dtype=np.int32)
        for k in range(c):
            region = self.labels == k
            if not region.any():
                continue  # class absent: empty boundary recorded
            self.present[k] = True
            interior = (region
                        & _shift_bool(region, 1, 0) & _shift_bool(region, -1, 0)
                        & _shift_bool(region, 0, 1) & _shift_bool(region, 0, -1))
            interior[0, :] = interior[-1, :] = False
            interior[:, 0] = interior[:, -1] = False
            boundary = region & ~interior
            self.boundary_masks[k] = boundary
            # EDT of the complement gives, per pixel, the closest boundary pixel
            _, inds = ndimage.distance_transform_edt(~boundary, return_indices=True)
            self._nearest[k] = inds

    def boundary_pixels(self, class_id: int) -> np.ndarray:
        """(B,2) float array of (u,v) boundary coordinates; empty if absent."""
        vs, us = np.nonzero(self.boundary_masks[class_id])
        return np.stack([us, vs], axis=1).astype(float)

    def label_at(self, uv: np.ndarray) -> np.ndarray:
        """Argmax label at continuous coords, nearest pixel, clamped to image."""
        u, v = self._clamped_rounded(uv)
        return self.labels[v, u]

    def nearest_boundary(self, class_id: int, uv: np.ndarray) -> np.ndarray:
        """(N,2) coords (u,v) of the nearest class boundary pixel to each query.

        The query is continuous; candidates are taken from the distance
        transform at the four surrounding lattice pixels and the best one
        per query wins. Class must be present in the frame.
        """
        if not self.present[class_id]:
            raise ValueError(f"class {class_id} absent from frame")
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        h, w = self.shape
        u0 = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, w - 1)
        v0 = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, h - 1)
        u1 = np.clip(u0 + 1, 0, w - 1)
        v1 = np.clip(v0 + 1, 0, h - 1)
        near = self._nearest[class_id]
        best = None
        best_d = None
        for vv, uu in ((v0, u0), (v0, u1), (v1, u0), (v1, u1)):
            cand_v = near[0, vv, uu].astype(float)
            cand_u = near[1, vv, uu].astype(float)
            d = (uv[:, 0] - cand_u) ** 2 + (uv[:, 1] - cand_v) ** 2
            if best is None:
                best = np.stack([cand_u, cand_v], axis=1)
                best_d = d
            else:
                take = d < best_d
                best[take, 0] = cand_u[take]
                best[take, 1] = cand_v[take]
                best_d = np.minimum(best_d, d)
        return best

    def _clamped_rounded(self, uv: np.ndarray):
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        h, w = self.shape
        u = np.clip(np.round(uv[:, 0]).astype(np.int64), 0, w - 1)
        v = np.clip(np.round(uv[:, 1]).astype(np.int64), 0, h - 1)
        return u, v


def build_boundary_field(sem_probs: np.ndarray) -> SemanticBoundaryField:
    """Construct the per-class boundary field for one frame's segmentation."""
    return SemanticBoundaryField(sem_probs)


def _shift_bool(mask: np.ndarray, dv: int, du: int) -> np.ndarray:
    """mask sampled at (v+dv, u+du); other-label outside the image."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    vs = slice(max(0, dv), h + min(0, dv))
    us = slice(max(0, du), w + min(0, du))
    vd = slice(max(0, -dv), h + min(0, -dv))
    ud = slice(max(0, -du), w + min(0, -du))
    out[vd, ud] = mask[vs, us]
    return out
