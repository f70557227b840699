"""Mean-shift segmentation used to suppress provider-specific detail in
street-level photographs before training.

Mode seeking runs in the joint (x, y, L, U, V) domain with flat kernels;
fused regions below the density threshold are merged into their most
similar neighbour.
"""

import heapq
from dataclasses import dataclass

import numpy as np
from numba import njit

from .imagery import RasterImage


@dataclass(frozen=True)
class SegmentationParams:
    spatial_radius: float = 6.0
    range_radius: float = 4.5
    min_density: int = 50
    max_iterations: int = 100
    convergence_eps: float = 0.01

    def __post_init__(self):
        if self.spatial_radius <= 0 or self.range_radius <= 0:
            raise ValueError("kernel radii must be positive")
        if self.min_density < 1:
            raise ValueError("min_density must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class SegmentedImage:
    image: RasterImage
    labels: np.ndarray  # (H, W) int32, contiguous 0..region_count-1
    region_count: int


# ---------------------------------------------------------------------------
# sRGB <-> CIE LUV (D65 white)

_RGB2XYZ = np.array([[0.4124564, 0.3575761, 0.1804375],
                     [0.2126729, 0.7151522, 0.0721750],
                     [0.0193339, 0.1191920, 0.9503041]])
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_WHITE = _RGB2XYZ @ np.ones(3)
_UN = 4.0 * _WHITE[0] / (_WHITE[0] + 15.0 * _WHITE[1] + 3.0 * _WHITE[2])
_VN = 9.0 * _WHITE[1] / (_WHITE[0] + 15.0 * _WHITE[1] + 3.0 * _WHITE[2])


def rgb_to_luv(rgb):
    """uint8 (..., 3) RGB to float64 LUV."""
    srgb = np.asarray(rgb, dtype=np.float64) / 255.0
    linear = np.where(srgb <= 0.04045, srgb / 12.92,
                      ((srgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB2XYZ.T
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    yr = y / _WHITE[1]
    L = np.where(yr > (6.0 / 29.0) ** 3, 116.0 * np.cbrt(yr) - 16.0,
                 (29.0 / 3.0) ** 3 * yr)
    denom = x + 15.0 * y + 3.0 * z
    safe = denom > 1e-12
    up = np.where(safe, 4.0 * x / np.where(safe, denom, 1.0), _UN)
    vp = np.where(safe, 9.0 * y / np.where(safe, denom, 1.0), _VN)
    u = 13.0 * L * (up - _UN)
    v = 13.0 * L * (vp - _VN)
    return np.stack([L, u, v], axis=-1)


def luv_to_rgb(luv):
    """float LUV back to uint8 RGB (clipped)."""
    luv = np.asarray(luv, dtype=np.float64)
    L, u, v = luv[..., 0], luv[..., 1], luv[..., 2]
    lit = L > 1e-8
    Lsafe = np.where(lit, L, 1.0)
    up = u / (13.0 * Lsafe) + _UN
    vp = v / (13.0 * Lsafe) + _VN
    y = np.where(L > 8.0, _WHITE[1] * ((L + 16.0) / 116.0) ** 3,
                 _WHITE[1] * L * (3.0 / 29.0) ** 3)
    vp_safe = np.where(np.abs(vp) > 1e-12, vp, 1.0)
    x = y * 9.0 * up / (4.0 * vp_safe)
    z = y * (12.0 - 3.0 * up - 20.0 * vp) / (4.0 * vp_safe)
    x = np.where(lit, x, 0.0)
    z = np.where(lit, z, 0.0)
    y = np.where(lit, y, 0.0)
    linear = np.stack([x, y, z], axis=-1) @ _XYZ2RGB.T
    linear = np.clip(linear, 0.0, 1.0)
    srgb = np.where(linear <= 0.0031308, linear * 12.92,
                    1.055 * linear ** (1.0 / 2.4) - 0.055)
    return np.clip(np.round(srgb * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# filtering

@njit(cache=True)
def _meanshift_modes(luv, hs, hr, eps, max_iter):
    H, W = luv.shape[0], luv.shape[1]
    out = np.empty_like(luv)
    hr2 = hr * hr
    eps2 = eps * eps
    for i in range(H):
        for j in range(W):
            x = float(j)
            y = float(i)
            L = luv[i, j, 0]
            U = luv[i, j, 1]
            V = luv[i, j, 2]
            for _ in range(max_iter):
                x0, y0, L0, U0, V0 = x, y, L, U, V
                ylo = max(0, int(np.ceil(y - hs)))
                yhi = min(H - 1, int(np.floor(y + hs)))
                xlo = max(0, int(np.ceil(x - hs)))
                xhi = min(W - 1, int(np.floor(x + hs)))
                sx = 0.0
                sy = 0.0
                sL = 0.0
                sU = 0.0
                sV = 0.0
                cnt = 0
                for yi in range(ylo, yhi + 1):
                    for xi in range(xlo, xhi + 1):
                        dL = luv[yi, xi, 0] - L
                        dU = luv[yi, xi, 1] - U
                        dV = luv[yi, xi, 2] - V
                        if dL * dL + dU * dU + dV * dV <= hr2:
                            sx += xi
                            sy += yi
                            sL += luv[yi, xi, 0]
                            sU += luv[yi, xi, 1]
                            sV += luv[yi, xi, 2]
                            cnt += 1
                if cnt == 0:
                    break
                x = sx / cnt
                y = sy / cnt
                L = sL / cnt
                U = sU / cnt
                V = sV / cnt
                shift = ((x - x0) ** 2 + (y - y0) ** 2 + (L - L0) ** 2
                         + (U - U0) ** 2 + (V - V0) ** 2)
                if shift <= eps2:
                    break
            out[i, j, 0] = L
            out[i, j, 1] = U
            out[i, j, 2] = V
    return out


def meanshift_filter(img, params=SegmentationParams()):
    """Replace each pixel's color by the color at its density mode."""
    luv = rgb_to_luv(img.pixels)
    modes = _meanshift_modes(luv, float(params.spatial_radius),
                             float(params.range_radius),
                             float(params.convergence_eps),
                             int(params.max_iterations))
    return RasterImage(luv_to_rgb(modes))


# ---------------------------------------------------------------------------
# region fusion

@njit(cache=True)
def _label_components(luv, hr):
    H, W = luv.shape[0], luv.shape[1]
    labels = np.full((H, W), -1, dtype=np.int32)
    stack = np.empty((H * W, 2), dtype=np.int32)
    hr2 = hr * hr
    next_label = 0
    for si in range(H):
        for sj in range(W):
            if labels[si, sj] >= 0:
                continue
            labels[si, sj] = next_label
            top = 0
            stack[top, 0] = si
            stack[top, 1] = sj
            top = 1
            while top > 0:
                top -= 1
                ci = stack[top, 0]
                cj = stack[top, 1]
                for k in range(4):
                    ni = ci + (1 if k == 0 else -1 if k == 1 else 0)
                    nj = cj + (1 if k == 2 else -1 if k == 3 else 0)
                    if ni < 0 or ni >= H or nj < 0 or nj >= W:
                        continue
                    if labels[ni, nj] >= 0:
                        continue
                    dL = luv[ni, nj, 0] - luv[ci, cj, 0]
                    dU = luv[ni, nj, 1] - luv[ci, cj, 1]
                    dV = luv[ni, nj, 2] - luv[ci, cj, 2]
                    if dL * dL + dU * dU + dV * dV <= hr2:
                        labels[ni, nj] = next_label
                        stack[top, 0] = ni
                        stack[top, 1] = nj
                        top += 1
            next_label += 1
    return labels, next_label


def _adjacency(labels, n):
    adj = [set() for _ in range(n)]
    a, b = labels[:, :-1].ravel(), labels[:, 1:].ravel()
    pairs = np.unique(np.stack([np.minimum(a, b), np.maximum(a, b)], 1), axis=0)
    c, d = labels[:-1, :].ravel(), labels[1:, :].ravel()
    pairs2 = np.unique(np.stack([np.minimum(c, d), np.maximum(c, d)], 1), axis=0)
    for p, q in np.concatenate([pairs, pairs2]):
        if p != q:
            adj[p].add(int(q))
            adj[q].add(int(p))
    return adj


def fuse_regions(filtered, params=SegmentationParams()):
    """Merge like-colored connected components; absorb small regions.

    Regions below min_density are merged ascending by size (ties by id)
    into the adjacent region with the closest LUV mean.
    """
    px = filtered.pixels
    H, W = px.shape[:2]
    luv = rgb_to_luv(px)
    labels, n = _label_components(luv, float(params.range_radius))

    flat_labels = labels.ravel()
    counts = np.bincount(flat_labels, minlength=n).astype(np.int64)
    # Integer RGB sums so final means are exact before a single rounding.
    rgb_sums = np.zeros((n, 3), dtype=np.int64)
    luv_sums = np.zeros((n, 3), dtype=np.float64)
    for c in range(3):
        rgb_sums[:, c] = np.bincount(flat_labels, weights=px[..., c].ravel(),
                                     minlength=n).astype(np.int64)
        luv_sums[:, c] = np.bincount(flat_labels, weights=luv[..., c].ravel(),
                                     minlength=n)

    adj = _adjacency(labels, n)
    parent = np.arange(n)

    def find(r):
        while parent[r] != r:
            parent[r] = parent[parent[r]]
            r = parent[r]
        return r

    heap = [(int(counts[r]), r) for r in range(n) if counts[r] < params.min_density]
    heapq.heapify(heap)
    while heap:
        size, r = heapq.heappop(heap)
        root = find(r)
        if root != r or counts[root] != size or counts[root] >= params.min_density:
            continue
        neighbours = {find(q) for q in adj[root]} - {root}
        if not neighbours:
            break
        mean = luv_sums[root] / counts[root]
        best = min(neighbours,
                   key=lambda q: (float(np.sum((luv_sums[q] / counts[q] - mean) ** 2)), q))
        # Absorb into the neighbour, keeping the neighbour's id as root.
        parent[root] = best
        counts[best] += counts[root]
        rgb_sums[best] += rgb_sums[root]
        luv_sums[best] += luv_sums[root]
        adj[best] |= adj[root]
        adj[best].discard(best)
        adj[best].discard(root)
        if counts[best] < params.min_density:
            heapq.heappush(heap, (int(counts[best]), int(best)))

    roots = np.array([find(r) for r in range(n)])
    final_labels = roots[labels]
    # Contiguous ids in order of first pixel occurrence.
    uniq, flat = np.unique(final_labels.ravel(), return_inverse=True)
    first_idx = np.full(uniq.size, flat.size, dtype=np.int64)
    np.minimum.at(first_idx, flat, np.arange(flat.size))
    seq = np.empty(uniq.size, dtype=np.int64)
    seq[np.argsort(first_idx)] = np.arange(uniq.size)
    out_labels = seq[flat].reshape(H, W).astype(np.int32)
    region_count = uniq.size

    means = np.zeros((region_count, 3), dtype=np.uint8)
    for new_id in range(region_count):
        old = uniq[np.flatnonzero(seq == new_id)[0]]
        means[new_id] = np.floor_divide(rgb_sums[old] * 2 + counts[old],
                                        2 * counts[old]).astype(np.uint8)
    out_px = means[out_labels]
    return SegmentedImage(image=RasterImage(out_px), labels=out_labels,
                          region_count=int(region_count))


def segment(img, params=SegmentationParams()):
    """meanshift_filter followed by fuse_regions."""
    return fuse_regions(meanshift_filter(img, params), params)
