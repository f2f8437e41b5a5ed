"""Soft surfel splatting and SSIM, with analytic derivatives.

Each surfel splats its color through an isotropic Gaussian footprint whose
pixel radius follows from its physical radius and depth. Per pixel the
splats are depth-weighted (soft front-most wins) and normalized, with a
small constant background weight so empty pixels fade to the background
color. The rendering loss compares the splat against the observed frame
with windowed SSIM and penalizes ((1 - SSIM)/2)^2 over covered pixels.

For optimization the awkward discrete pieces (footprint size, front-most
reference depth, the covered-pixel set) are frozen into a context at the
start of each solve epoch; the remaining map from surfel positions to the
loss is smooth and differentiated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics

# splat defaults (config-exposed)
SIGMA_SPREAD = 1.0     # footprint scale: sigma_px = fx * radius / z * spread
CUT_SIGMAS = 3.0       # kernel support radius in sigmas
Z_SOFT_M = 0.01        # depth softness of the front-most weighting
BG_WEIGHT = 1e-4       # constant background weight in the normalization
MIN_Z = 1e-6

# SSIM defaults for unit dynamic range
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class RenderedImage:
    color: np.ndarray     # (H,W,3) in [0,1]
    coverage: np.ndarray  # (H,W) accumulated splat weight


@dataclass
class RenderConfig:
    spread: float = SIGMA_SPREAD
    cut_sigmas: float = CUT_SIGMAS
    z_soft: float = Z_SOFT_M
    bg_weight: float = BG_WEIGHT
    bg_color: tuple = (0.0, 0.0, 0.0)


def _footprint(uv, z, radii, K: CameraIntrinsics, cfg: RenderConfig):
    """Frozen per-surfel footprint: sigma in pixels and window half-size."""
    sigma = np.maximum(K.fx * radii / z * cfg.spread, 0.3)
    half = np.ceil(cfg.cut_sigmas * sigma).astype(np.int64) + 1
    return sigma, half


def _splat_terms(uv, z, sigma, half, colors, shape, cfg: RenderConfig,
                 z_ref=None):
    """Accumulate splat sums; optionally also the per-pixel min depth.

    Returns (num (H,W,3), den (H,W), wsum (H,W), z_min (H,W)). Surfels are
    processed in buckets of equal window half-size so the inner loops stay
    vectorized. z_ref=None uses the live per-pixel minimum depth (pure
    forward rendering); otherwise the provided frozen reference is used.
    """
    h, w = shape
    num = np.zeros((h * w, 3))
    den = np.full(h * w, cfg.bg_weight)
    wsum = np.zeros(h * w)
    z_min = np.full(h * w, np.inf)

    cu = np.round(uv[:, 0]).astype(np.int64)
    cv = np.round(uv[:, 1]).astype(np.int64)

    def kernel_weights(sel, hs):
        offs = np.arange(-hs, hs + 1)
        du, dv = np.meshgrid(offs, offs)
        px_u = cu[sel][:, None] + du.ravel()[None, :]
        px_v = cv[sel][:, None] + dv.ravel()[None, :]
        inside = (px_u >= 0) & (px_u < w) & (px_v >= 0) & (px_v < h)
        d2 = ((px_u - uv[sel, 0][:, None]) ** 2
              + (px_v - uv[sel, 1][:, None]) ** 2)
        s2 = sigma[sel][:, None] ** 2
        # Gaussian with a C1 taper to zero at the cut radius, so gradients
        # stay finite-difference-clean across the support edge
        taper = np.maximum(1.0 - d2 / (cfg.cut_sigmas ** 2 * s2), 0.0)
        wk = np.where(inside, np.exp(-0.5 * d2 / s2) * taper * taper, 0.0)
        flat = np.clip(px_v, 0, h - 1) * w + np.clip(px_u, 0, w - 1)
        return wk, flat

    if z_ref is None:
        # first pass: per-pixel front-most depth among touching surfels
        for hs in np.unique(half):
            sel = np.nonzero(half == hs)[0]
            wk, flat = kernel_weights(sel, hs)
            touch = wk > 0
            zz = np.broadcast_to(z[sel][:, None], wk.shape)
            np.minimum.at(z_min, flat[touch], zz[touch])
        ref = z_min
    else:
        ref = np.asarray(z_ref, dtype=float).ravel()

    for hs in np.unique(half):
        sel = np.nonzero(half == hs)[0]
        wk, flat = kernel_weights(sel, hs)
        safe_ref = np.where(np.isfinite(ref[flat]), ref[flat], z[sel][:, None])
        ww = wk * np.exp(-(z[sel][:, None] - safe_ref) / cfg.z_soft)
        den += np.bincount(flat.ravel(), weights=ww.ravel(), minlength=h * w)
        wsum += np.bincount(flat.ravel(), weights=ww.ravel(), minlength=h * w)
        for ch in range(3):
            contrib = ww * colors[sel, ch][:, None]
            num[:, ch] += np.bincount(flat.ravel(), weights=contrib.ravel(),
                                      minlength=h * w)
    num += cfg.bg_weight * np.asarray(cfg.bg_color)
    return num, den, wsum, z_min


def splat_render(points: np.ndarray, colors: np.ndarray, radii: np.ndarray,
                 K: CameraIntrinsics, cfg: RenderConfig | None = None) -> RenderedImage:
    """Render transformed surfels; raises "nothing to render" if none are
    in front of the camera."""
    cfg = cfg or RenderConfig()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    z = points[:, 2]
    front = z > MIN_Z
    if not front.any():
        raise ValueError("nothing to render")
    pts = points[front]
    uv = np.stack([K.fx * pts[:, 0] / pts[:, 2] + K.cx,
                   K.fy * pts[:, 1] / pts[:, 2] + K.cy], axis=1)
    sigma, half = _footprint(uv, pts[:, 2], np.asarray(radii)[front], K, cfg)
    num, den, wsum, _ = _splat_terms(uv, pts[:, 2], sigma, half,
                                     np.asarray(colors)[front], (K.height, K.width), cfg)
    color = (num / den[:, None]).reshape(K.height, K.width, 3)
    return RenderedImage(color=color, coverage=wsum.reshape(K.height, K.width))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window) - (window - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable zero-padded correlation; symmetric kernel, so this map is
    its own adjoint."""
    out = ndimage.correlate1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


def _ssim_channel_fields(y: np.ndarray, kernel: np.ndarray):
    """Frame-side convolved fields reused across evaluations."""
    mu = _blur(y, kernel)
    ey2 = _blur(y * y, kernel)
    return mu, ey2


def _ssim_channel(x, y_mu, y_ey2, y, kernel):
    """Per-pixel SSIM of channel x against a precomputed reference channel.

    Returns (S map, terms dict for the backward pass).
    """
    mx = _blur(x, kernel)
    ex2 = _blur(x * x, kernel)
    exy = _blur(x * y, kernel)
    a1 = 2 * mx * y_mu + SSIM_C1
    a2 = 2 * (exy - mx * y_mu) + SSIM_C2
    b1 = mx * mx + y_mu * y_mu + SSIM_C1
    b2 = (ex2 - mx * mx) + (y_ey2 - y_mu * y_mu) + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, {"mx": mx, "a1": a1, "a2": a2, "b1": b1, "b2": b2, "s": s}


def _ssim_channel_backward(gs, terms, y_mu, y, x, kernel):
    """dLoss/dx given dLoss/dS = gs, chained through the convolved fields."""
    mx, a1, a2, b1, b2, s = (terms[k] for k in ("mx", "a1", "a2", "b1", "b2", "s"))
    d_mu = gs * (2 * y_mu * (a2 - a1) / (b1 * b2) - 2 * mx * s / b1 + 2 * mx * s / b2)
    d_ex2 = gs * (-s / b2)
    d_exy = gs * (2 * a1 / (b1 * b2))
    return _blur(d_mu, kernel) + _blur(d_ex2, kernel) * 2 * x + _blur(d_exy, kernel) * y


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over pixels and channels (Gaussian window, unit range)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kernel = _gaussian_kernel(window, SSIM_SIGMA)
    total = 0.0
    for ch in range(a.shape[2]):
        y_mu, y_ey2 = _ssim_channel_fields(b[..., ch], kernel)
        s, _ = _ssim_channel(a[..., ch], y_mu, y_ey2, b[..., ch], kernel)
        total += float(s.mean())
    return total / a.shape[2]


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> np.ndarray:
    """Channel-averaged per-pixel SSIM map."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kernel = _gaussian_kernel(window, SSIM_SIGMA)
    acc = np.zeros(a.shape[:2])
    for ch in range(a.shape[2]):
        y_mu, y_ey2 = _ssim_channel_fields(b[..., ch], kernel)
        s, _ = _ssim_channel(a[..., ch], y_mu, y_ey2, b[..., ch], kernel)
        acc += s
    return acc / a.shape[2]


def render_loss(frame_rgb: np.ndarray, rendered: RenderedImage,
                window: int = SSIM_WINDOW) -> float:
    """Mean of ((1 - SSIM)/2)^2 over pixels with nonzero coverage."""
    s = ssim_map(rendered.color, frame_rgb, window)
    mask = rendered.coverage > 0
    if not mask.any():
        return 0.0
    val = ((1.0 - s[mask]) / 2.0) ** 2
    return float(val.mean())


@dataclass
class RenderLossContext:
    """Everything frozen for one solve epoch of the rendering term."""
    sigma: np.ndarray       # (M,) footprint sigmas of front surfels
    half: np.ndarray        # (M,) window half-sizes
    z_ref: np.ndarray       # (H,W) frozen front-most depth per pixel
    mask: np.ndarray        # (H,W) pixels included in the loss
    surfel_sel: np.ndarray  # (M,) indices into the full surfel arrays
    colors: np.ndarray      # (M,3)
    frame: np.ndarray       # (H,W,3) observation
    y_mu: np.ndarray        # (3,H,W) frame-side SSIM fields
    y_ey2: np.ndarray
    kernel: np.ndarray
    cfg: RenderConfig
    K: CameraIntrinsics


def build_render_context(points, colors, radii, frame_rgb,
                         K: CameraIntrinsics, cfg: RenderConfig | None = None,
                         window: int = SSIM_WINDOW) -> RenderLossContext:
    """Freeze footprints, reference depths and the covered-pixel set at the
    current surfel positions."""
    cfg = cfg or RenderConfig()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    z = points[:, 2]
    sel = np.nonzero(z > MIN_Z)[0]
    if len(sel) == 0:
        raise ValueError("nothing to render")
    pts = points[sel]
    uv = np.stack([K.fx * pts[:, 0] / pts[:, 2] + K.cx,
                   K.fy * pts[:, 1] / pts[:, 2] + K.cy], axis=1)
    sigma, half = _footprint(uv, pts[:, 2], np.asarray(radii)[sel], K, cfg)
    cols = np.asarray(colors)[sel]
    num, den, wsum, z_min = _splat_terms(uv, pts[:, 2], sigma, half, cols,
                                         (K.height, K.width), cfg)
    z_ref = np.where(np.isfinite(z_min), z_min, 0.0).reshape(K.height, K.width)
    mask = wsum.reshape(K.height, K.width) > 0
    kernel = _gaussian_kernel(window, SSIM_SIGMA)
    frame_rgb = np.asarray(frame_rgb, dtype=float)
    y_mu = np.stack([_ssim_channel_fields(frame_rgb[..., c], kernel)[0]
                     for c in range(3)])
    y_ey2 = np.stack([_ssim_channel_fields(frame_rgb[..., c], kernel)[1]
                      for c in range(3)])
    return RenderLossContext(sigma=sigma, half=half, z_ref=z_ref, mask=mask,
                             surfel_sel=sel, colors=cols, frame=frame_rgb,
                             y_mu=y_mu, y_ey2=y_ey2, kernel=kernel, cfg=cfg, K=K)


def _context_render(points_sel: np.ndarray, ctx: RenderLossContext,
                    keep_terms: bool = False):
    """Render under the frozen context; smooth in the surfel positions.

    Returns (color (H,W,3), terms for the backward pass). Pass
    keep_terms only when the backward pass follows; the per-bucket
    intermediates are large.
    """
    cfg = ctx.cfg
    h, w = ctx.z_ref.shape
    z = points_sel[:, 2]
    K_half = ctx.half
    # live projection; footprint and reference depth stay frozen
    uv = np.stack([ctx.K.fx * points_sel[:, 0] / z + ctx.K.cx,
                   ctx.K.fy * points_sel[:, 1] / z + ctx.K.cy], axis=1)
    num = np.zeros((h * w, 3))
    den = np.full(h * w, cfg.bg_weight)
    cu = np.round(uv[:, 0]).astype(np.int64)
    cv = np.round(uv[:, 1]).astype(np.int64)
    cut2 = cfg.cut_sigmas ** 2
    per_bucket = []
    for hs in np.unique(K_half):
        sel = np.nonzero(K_half == hs)[0]
        offs = np.arange(-hs, hs + 1)
        du, dv = np.meshgrid(offs, offs)
        px_u = cu[sel][:, None] + du.ravel()[None, :]
        px_v = cv[sel][:, None] + dv.ravel()[None, :]
        inside = (px_u >= 0) & (px_u < w) & (px_v >= 0) & (px_v < h)
        ru = px_u - uv[sel, 0][:, None]
        rv = px_v - uv[sel, 1][:, None]
        q = (ru ** 2 + rv ** 2) / ctx.sigma[sel][:, None] ** 2
        expo = np.exp(-0.5 * q)
        taper = np.maximum(1.0 - q / cut2, 0.0)
        wk = np.where(inside, expo * taper * taper, 0.0)
        flat = np.clip(px_v, 0, h - 1) * w + np.clip(px_u, 0, w - 1)
        zr = ctx.z_ref.ravel()[flat]
        ez = np.exp(-(z[sel][:, None] - zr) / cfg.z_soft)
        ww = wk * ez
        flat_r = flat.ravel()
        den += np.bincount(flat_r, weights=ww.ravel(), minlength=h * w)
        for ch in range(3):
            num[:, ch] += np.bincount(
                flat_r, weights=(ww * ctx.colors[sel, ch][:, None]).ravel(),
                minlength=h * w)
        if keep_terms:
            per_bucket.append((sel, flat, wk, ez, expo, taper, ru, rv))
    num += cfg.bg_weight * np.asarray(cfg.bg_color)
    color = (num / den[:, None]).reshape(h, w, 3)
    return color, (per_bucket, den, uv)


def context_render_loss(points_sel: np.ndarray, ctx: RenderLossContext) -> float:
    color, _ = _context_render(points_sel, ctx)
    s = np.zeros(ctx.z_ref.shape)
    for ch in range(3):
        sc, _ = _ssim_channel(color[..., ch], ctx.y_mu[ch], ctx.y_ey2[ch],
                              ctx.frame[..., ch], ctx.kernel)
        s += sc
    s /= 3.0
    if not ctx.mask.any():
        return 0.0
    return float((((1.0 - s[ctx.mask]) / 2.0) ** 2).mean())


def context_render_loss_grad(points_sel: np.ndarray, ctx: RenderLossContext):
    """(loss, dLoss/dpoints_sel (M,3)) under the frozen context."""
    cfg = ctx.cfg
    h, w = ctx.z_ref.shape
    color, (per_bucket, den, uv) = _context_render(points_sel, ctx,
                                                   keep_terms=True)
    n_mask = int(ctx.mask.sum())
    if n_mask == 0:
        return 0.0, np.zeros_like(points_sel)

    s_acc = np.zeros((h, w))
    ch_terms = []
    for ch in range(3):
        sc, terms = _ssim_channel(color[..., ch], ctx.y_mu[ch], ctx.y_ey2[ch],
                                  ctx.frame[..., ch], ctx.kernel)
        s_acc += sc
        ch_terms.append(terms)
    s_map = s_acc / 3.0
    loss = float((((1.0 - s_map[ctx.mask]) / 2.0) ** 2).mean())

    # dLoss/dS on masked pixels, then through SSIM to the rendered image
    gs_map = np.zeros((h, w))
    gs_map[ctx.mask] = -(1.0 - s_map[ctx.mask]) / (2.0 * n_mask)
    d_color = np.zeros((h, w, 3))
    for ch in range(3):
        d_color[..., ch] = _ssim_channel_backward(
            gs_map / 3.0, ch_terms[ch], ctx.y_mu[ch], ctx.frame[..., ch],
            color[..., ch], ctx.kernel)

    # through the normalized splat to each surfel's (u, v, z)
    d_color_flat = d_color.reshape(-1, 3)
    color_flat = color.reshape(-1, 3)
    z = points_sel[:, 2]
    d_uv = np.zeros_like(uv)
    d_z = np.zeros(len(points_sel))
    cut2 = cfg.cut_sigmas ** 2
    for sel, flat, wk, ez, expo, taper, ru, rv in per_bucket:
        # dLoss/dW for every (surfel, pixel) contribution
        diff = ctx.colors[sel][:, None, :] - color_flat[flat]
        dLdW = np.sum(d_color_flat[flat] * diff, axis=2) / den[flat]
        live = wk > 0
        # d(expo taper^2)/du with taper = max(1 - d2/(cut2 s2), 0)
        s2 = ctx.sigma[sel][:, None] ** 2
        gain = expo * taper * (taper + 4.0 / cut2) / s2
        dw_du = np.where(live, gain * ru, 0.0)
        dw_dv = np.where(live, gain * rv, 0.0)
        d_uv[sel, 0] += np.sum(dLdW * ez * dw_du, axis=1)
        d_uv[sel, 1] += np.sum(dLdW * ez * dw_dv, axis=1)
        d_z[sel] += np.sum(dLdW * wk * ez * (-1.0 / cfg.z_soft), axis=1)

    # chain projection: u = fx x / z + cx, v = fy y / z + cy
    d_pts = np.zeros_like(points_sel)
    d_pts[:, 0] = d_uv[:, 0] * ctx.K.fx / z
    d_pts[:, 1] = d_uv[:, 1] * ctx.K.fy / z
    d_pts[:, 2] = (-d_uv[:, 0] * ctx.K.fx * points_sel[:, 0] / z ** 2
                   - d_uv[:, 1] * ctx.K.fy * points_sel[:, 1] / z ** 2 + d_z)
    return loss, d_pts
