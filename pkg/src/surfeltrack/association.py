"""Projective data association between transformed surfels and a frame.

Each surfel is projected into the current frame with the candidate
deformation; observed position, normal and semantic scores are bilinearly
sampled at the projected pixel. An association is rejected when the
projection leaves the image, touches an invalid pixel, or disagrees too
much in distance or normal direction. The surviving matches carry a
semantic consistency weight rho.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import project_valid
from .frames import Frame, ObservationMaps
from .kinematics import DeformationState, transform_normals, transform_points

DIST_THRESH_M = 0.05
ANGLE_THRESH_DEG = 45.0


def jsd(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Jensen-Shannon divergence with natural log; range [0, ln 2].

    Accepts single vectors or (..., C) batches; the two inputs must have
    the same trailing length. Zero entries contribute zero.
    """
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if s1.shape[-1] != s2.shape[-1]:
        raise ValueError("semantic score length mismatch")
    m = 0.5 * (s1 + s2)

    def kl(p, q):
        ratio = np.divide(p, q, out=np.ones_like(p), where=(p > 0) & (q > 0))
        return np.sum(np.where(p > 0, p * np.log(ratio), 0.0), axis=-1)

    out = 0.5 * kl(s1, m) + 0.5 * kl(s2, m)
    # guard rounding just above the closed-form maximum
    return np.clip(out, 0.0, np.log(2.0))


def bilinear_sample(img: np.ndarray, uv: np.ndarray, valid: np.ndarray):
    """Sample (H,W,D) img at continuous pixel coords uv (N,2).

    Integer coordinates address pixel centers. A sample is kept only when
    all four contributing pixels are inside the image and valid. Returns
    (values (N,D), ok (N,)); rejected rows are zero.
    """
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u0 = np.floor(uv[:, 0]).astype(np.int64)
    v0 = np.floor(uv[:, 1]).astype(np.int64)
    fu = uv[:, 0] - u0
    fv = uv[:, 1] - v0
    u0c = np.clip(u0, 0, w - 1)
    v0c = np.clip(v0, 0, h - 1)
    u1c = np.clip(u0 + 1, 0, w - 1)
    v1c = np.clip(v0 + 1, 0, h - 1)
    ws = [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv]
    corners = [(v0c, u0c), (v0c, u1c), (v1c, u0c), (v1c, u1c)]
    raw = [(u0, v0), (u0 + 1, v0), (u0, v0 + 1), (u0 + 1, v0 + 1)]
    ok = np.ones(len(uv), dtype=bool)
    vals = np.zeros((len(uv),) + img.shape[2:])
    for wgt, (vc, uc), (ur, vr) in zip(ws, corners, raw):
        live = wgt > 0
        inb = (ur >= 0) & (ur < w) & (vr >= 0) & (vr < h)
        ok &= ~live | (inb & valid[vc, uc])
        vals += np.where(live, wgt, 0.0).reshape(-1, *([1] * (img.ndim - 2))) \
            * img[vc, uc]
    vals[~ok] = 0.0
    return vals, ok


@dataclass
class AssociationSet:
    """Accepted surfel-observation matches, frozen for one solve epoch.

    indices: (M,) positions into the surfel arrays; obs_points/obs_normals:
    (M,3); obs_sem: (M,C); rho: (M,) in (0,1]. n_surfels records the full
    cloud size the associations were built from.
    """
    indices: np.ndarray
    obs_points: np.ndarray
    obs_normals: np.ndarray
    obs_sem: np.ndarray
    rho: np.ndarray
    n_surfels: int

    def __len__(self) -> int:
        return len(self.indices)


def associate(positions, normals, sem_scores, labels, state: DeformationState,
              skin_idx, skin_w, node_pos, maps: ObservationMaps, frame: Frame,
              semantic_mode: str = "soft", dist_thresh: float = DIST_THRESH_M,
              angle_thresh_deg: float = ANGLE_THRESH_DEG) -> AssociationSet:
    """Build the association set for the current deformation state.

    semantic_mode: "soft" weights matches by rho = exp(-JSD(s_i, s_o));
    "hard" keeps only matches whose argmax labels agree (rho = 1);
    "off" accepts all geometric matches with rho = 1.
    """
    n = len(positions)
    p_t = transform_points(positions, state, skin_idx, skin_w, node_pos)
    n_t = transform_normals(normals, state, skin_idx, skin_w)
    uv, in_front = project_valid(p_t, frame.intrinsics)

    obs_p, ok_p = bilinear_sample(maps.points, uv, maps.valid)
    obs_n, _ = bilinear_sample(maps.normals, uv, maps.valid)
    obs_s, _ = bilinear_sample(frame.sem_probs, uv, maps.valid)
    ok = in_front & ok_p

    nlen = np.linalg.norm(obs_n, axis=1)
    ok &= nlen > 1e-8
    obs_n = obs_n / np.where(nlen > 1e-8, nlen, 1.0)[:, None]
    ssum = obs_s.sum(axis=1)
    ok &= ssum > 1e-8
    obs_s = obs_s / np.where(ssum > 1e-8, ssum, 1.0)[:, None]

    ok &= np.linalg.norm(p_t - obs_p, axis=1) <= dist_thresh
    cos_thresh = np.cos(np.deg2rad(angle_thresh_deg))
    ok &= np.sum(n_t * obs_n, axis=1) >= cos_thresh

    if semantic_mode == "soft":
        rho = np.exp(-jsd(sem_scores, obs_s))
    elif semantic_mode == "hard":
        ok &= labels == np.argmax(obs_s, axis=1)
        rho = np.ones(n)
    elif semantic_mode == "off":
        rho = np.ones(n)
    else:
        raise ValueError(f"unknown semantic mode: {semantic_mode!r}")

    idx = np.nonzero(ok)[0]
    return AssociationSet(indices=idx, obs_points=obs_p[idx],
                          obs_normals=obs_n[idx], obs_sem=obs_s[idx],
                          rho=rho[idx], n_surfels=n)
