"""Masked image metrics and LiDAR re-simulation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import TriMesh
from .lidar import PointCloud, build_bvh, cast_rays
from .rendering import AppearanceParams, render

SSIM_SIGMA = 1.5
SSIM_SIZE = 11
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CHAMFER_CONVENTION = "0.5 * (mean sq. NN distance sim->real + mean sq. NN distance real->sim), m^2"


@dataclass(frozen=True)
class ImageMetrics:
    mse: float
    psnr: float  # inf for identical foregrounds
    ssim: float

    def to_dict(self) -> dict:
        return {"mse": self.mse, "psnr": "inf" if math.isinf(self.psnr) else self.psnr, "ssim": self.ssim,
                "lpips": "n/a", "fid": "n/a"}


@dataclass(frozen=True)
class LidarMetrics:
    l2_error: float
    hit_rate: float
    chamfer: float
    hausdorff: float
    n_rays: int = 0

    def to_dict(self) -> dict:
        return {"l2_error": self.l2_error, "hit_rate": self.hit_rate, "chamfer": self.chamfer,
                "hausdorff": self.hausdorff, "n_rays": self.n_rays, "chamfer_convention": CHAMFER_CONVENTION}


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_SIZE, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _channels(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def ssim_map(a: np.ndarray, b: np.ndarray, window: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel SSIM for every window lying fully inside the image; returns (map HxWxC, valid HxW)."""
    window = gaussian_window() if window is None else window
    a, b = _channels(a), _channels(b)
    h, w, c = a.shape
    r = window.shape[0] // 2
    out = np.zeros((h, w, c))
    for ch in range(c):
        x, y = a[..., ch], b[..., ch]
        f = lambda im: ndimage.correlate(im, window, mode="constant")  # noqa: E731
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        out[..., ch] = ((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)) / \
                       ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2))
    valid = np.zeros((h, w), dtype=bool)
    valid[r:h - r, r:w - r] = True
    return out, valid


def masked_image_metrics(sim: np.ndarray, real: np.ndarray, mask: np.ndarray) -> ImageMetrics:
    """MSE/PSNR over foreground pixels, SSIM averaged over windows centred on the foreground."""
    sim, real = _channels(sim), _channels(real)
    if sim.shape != real.shape or sim.shape[:2] != np.shape(mask):
        raise ValueError("image and mask dimensions differ")
    fg = np.asarray(mask) > 0.5
    if not fg.any():
        raise ValueError("mask is empty")
    mse = float(((sim - real) ** 2)[fg].mean())
    smap, valid = ssim_map(sim, real)
    centres = fg & valid
    if not centres.any():
        # foreground too close to the border for a full window; fall back to all foreground centres
        centres = fg
    return ImageMetrics(mse, psnr_from_mse(mse), float(smap[centres].mean()))


def ssim_naive(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Direct per-window reference for :func:`masked_image_metrics` SSIM (slow)."""
    a, b = _channels(a), _channels(b)
    win = gaussian_window()
    r = win.shape[0] // 2
    h, w, c = a.shape
    vals = []
    for i in range(r, h - r):
        for j in range(r, w - r):
            if mask[i, j] <= 0.5:
                continue
            for ch in range(c):
                pa = a[i - r:i + r + 1, j - r:j + r + 1, ch]
                pb = b[i - r:i + r + 1, j - r:j + r + 1, ch]
                ma, mb = (win * pa).sum(), (win * pb).sum()
                va = (win * (pa - ma) ** 2).sum()
                vb = (win * (pb - mb) ** 2).sum()
                cov = (win * (pa - ma) * (pb - mb)).sum()
                vals.append(((2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2)) /
                            ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# point sets


def nn_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b``."""
    return cKDTree(np.asarray(b, dtype=np.float64)).query(np.asarray(a, dtype=np.float64))[0]


def symmetric_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        return math.inf
    return 0.5 * float((nn_distances(a, b) ** 2).mean() + (nn_distances(b, a) ** 2).mean())


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        return math.inf
    return float(max(nn_distances(a, b).max(), nn_distances(b, a).max()))


def lidar_eval(mesh: TriMesh, heldout: PointCloud, reference: Optional[PointCloud] = None,
               max_range: float = np.inf) -> LidarMetrics:
    """Re-cast every held-out return against ``mesh`` (already placed in the cloud's frame).

    A ray from the point's sensor origin towards the point that hits the mesh
    counts toward the hit rate and adds ``|t_sim - t_real|`` to the l2 error.
    Chamfer and Hausdorff compare the simulated hits with ``reference``
    (the full aggregated cloud; defaults to the held-out points).
    """
    pts = np.asarray(heldout.points, dtype=np.float64)
    if len(pts) == 0:
        return LidarMetrics(0.0, 0.0, math.inf, math.inf, 0)
    if heldout.ray_origin is None:
        raise ValueError("lidar_eval needs a sensor origin for every held-out point")
    o = np.asarray(heldout.ray_origin, dtype=np.float64)
    ray = pts - o
    t_real = np.linalg.norm(ray, axis=1)
    hits = cast_rays(build_bvh(mesh), o, ray / t_real[:, None], max_range)
    hit = hits.hit
    l2 = float(np.abs(hits.t[hit] - t_real[hit]).mean()) if hit.any() else math.inf
    sim = o[hit] + hits.t[hit, None] * (ray[hit] / t_real[hit, None])
    ref = pts if reference is None else np.asarray(reference.points, dtype=np.float64)
    return LidarMetrics(l2, float(hit.mean()), symmetric_chamfer(sim, ref), hausdorff(sim, ref), len(pts))


def view_metrics(mesh: TriMesh, app: AppearanceParams, frames, specular: bool = True) -> list[ImageMetrics]:
    """Render ``mesh`` into each frame's camera and score it against the frame's image on its mask.

    Renders are clipped to the [0, 1] range of the stored images."""
    out = []
    for f in frames:
        r = render(mesh, app, f.camera, tau=0.0, specular=specular)
        out.append(masked_image_metrics(np.clip(r.color, 0.0, 1.0), f.image, f.mask))
    return out


def mean_metrics(items: list[ImageMetrics]) -> ImageMetrics:
    """Average MSE and SSIM over views; PSNR is the mean of the per-view values."""
    if not items:
        raise ValueError("no metrics to average")
    return ImageMetrics(float(np.mean([m.mse for m in items])), float(np.mean([m.psnr for m in items])),
                        float(np.mean([m.ssim for m in items])))
