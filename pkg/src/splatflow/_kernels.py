"""Numba kernels for the tile rasterizer: per-tile alpha-blend forward and
its analytic backward.

Both passes use the identical contribution rule so gradients match the
rendered values exactly:

* alpha = min(opacity * exp(power), 0.99)
* contributions with alpha < 1/255 are skipped,
* a primitive whose inclusion would drop transmittance below 1e-4 is
  excluded and blending stops for that pixel.

The forward kernel writes disjoint pixels per tile; the backward kernel
accumulates per-primitive gradients serially in fixed tile order so results
are bitwise reproducible.
"""

import numpy as np
from numba import njit

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_TERMINATE = 1e-4


@njit(cache=True)
def blend_forward(tile_offsets, tile_prims, center, conic, depth, opacity, color,
                  flow, background, width, height, tile_size, n_tiles_x,
                  out_color, out_depth, out_flow, out_opacity, out_trans, out_last):
    """Front-to-back blend of tile-binned primitives.

    tile_offsets: (n_tiles+1,) int64 prefix offsets into tile_prims
    tile_prims:   (M,) int64 primitive ids, depth-sorted within each tile
    out_last:     (H, W) int64, index into the pixel's tile list one past the
                  last contributing primitive (for the backward sweep)
    """
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        row0 = ty * tile_size
        col0 = tx * tile_size
        row1 = min(row0 + tile_size, height)
        col1 = min(col0 + tile_size, width)
        start = tile_offsets[tile]
        stop = tile_offsets[tile + 1]
        for row in range(row0, row1):
            py = row + 0.5
            for col in range(col0, col1):
                px = col + 0.5
                T = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                acc_fx = 0.0
                acc_fy = 0.0
                acc_o = 0.0
                last = 0
                for k in range(start, stop):
                    g = tile_prims[k]
                    dx = px - center[g, 0]
                    dy = py - center[g, 1]
                    power = (-0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                             - conic[g, 1] * dx * dy)
                    alpha = opacity[g] * np.exp(power)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    t_new = T * (1.0 - alpha)
                    if t_new < T_TERMINATE:
                        break
                    w = alpha * T
                    acc_r += w * color[g, 0]
                    acc_g += w * color[g, 1]
                    acc_b += w * color[g, 2]
                    acc_d += w * depth[g]
                    acc_fx += w * flow[g, 0]
                    acc_fy += w * flow[g, 1]
                    acc_o += w
                    T = t_new
                    last = k - start + 1
                out_color[row, col, 0] = acc_r + background[0] * T
                out_color[row, col, 1] = acc_g + background[1] * T
                out_color[row, col, 2] = acc_b + background[2] * T
                out_depth[row, col] = acc_d
                out_flow[row, col, 0] = acc_fx
                out_flow[row, col, 1] = acc_fy
                out_opacity[row, col] = acc_o
                out_trans[row, col] = T
                out_last[row, col] = last


@njit(cache=True)
def blend_backward(tile_offsets, tile_prims, center, conic, depth, opacity, color,
                   flow, background, width, height, tile_size, n_tiles_x,
                   trans, last_contrib,
                   d_out_color, d_out_depth, d_out_flow, d_out_opacity,
                   d_center, d_conic, d_depth, d_opacity, d_color, d_flow):
    """Analytic gradients of blend_forward w.r.t. every primitive attribute.

    Walks each pixel's contribution list back to front, reconstructing the
    per-primitive transmittance by division (alpha <= 0.99 keeps this stable)
    and maintaining suffix sums per channel. The background term enters as a
    virtual final contribution via the suffix initialization.
    """
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // n_tiles_x
        tx = tile - ty * n_tiles_x
        row0 = ty * tile_size
        col0 = tx * tile_size
        row1 = min(row0 + tile_size, height)
        col1 = min(col0 + tile_size, width)
        start = tile_offsets[tile]
        for row in range(row0, row1):
            py = row + 0.5
            for col in range(col0, col1):
                last = last_contrib[row, col]
                if last == 0:
                    continue
                px = col + 0.5
                dC_r = d_out_color[row, col, 0]
                dC_g = d_out_color[row, col, 1]
                dC_b = d_out_color[row, col, 2]
                dD = d_out_depth[row, col]
                dF_x = d_out_flow[row, col, 0]
                dF_y = d_out_flow[row, col, 1]
                dO = d_out_opacity[row, col]
                T_after = trans[row, col]
                # suffix sums S = sum_{k>i} c_k alpha_k T_k, seeded with the
                # background's bg * T_final so d(bg*T)/dalpha falls out too
                S_r = background[0] * T_after
                S_g = background[1] * T_after
                S_b = background[2] * T_after
                S_d = 0.0
                S_fx = 0.0
                S_fy = 0.0
                S_o = 0.0
                for k in range(start + last - 1, start - 1, -1):
                    g = tile_prims[k]
                    dx = px - center[g, 0]
                    dy = py - center[g, 1]
                    power = (-0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                             - conic[g, 1] * dx * dy)
                    gval = np.exp(power)
                    raw = opacity[g] * gval
                    clamped = raw > ALPHA_CLAMP
                    alpha = ALPHA_CLAMP if clamped else raw
                    if alpha < ALPHA_SKIP:
                        continue
                    one_m = 1.0 - alpha
                    T_before = T_after / one_m
                    w = alpha * T_before
                    # channel value gradients
                    d_color[g, 0] += dC_r * w
                    d_color[g, 1] += dC_g * w
                    d_color[g, 2] += dC_b * w
                    d_depth[g] += dD * w
                    d_flow[g, 0] += dF_x * w
                    d_flow[g, 1] += dF_y * w
                    # alpha gradient via every blended channel + opacity
                    d_alpha = (dC_r * (T_before * color[g, 0] - S_r / one_m)
                               + dC_g * (T_before * color[g, 1] - S_g / one_m)
                               + dC_b * (T_before * color[g, 2] - S_b / one_m)
                               + dD * (T_before * depth[g] - S_d / one_m)
                               + dF_x * (T_before * flow[g, 0] - S_fx / one_m)
                               + dF_y * (T_before * flow[g, 1] - S_fy / one_m)
                               + dO * (T_before - S_o / one_m))
                    # update suffixes to include this primitive
                    S_r += w * color[g, 0]
                    S_g += w * color[g, 1]
                    S_b += w * color[g, 2]
                    S_d += w * depth[g]
                    S_fx += w * flow[g, 0]
                    S_fy += w * flow[g, 1]
                    S_o += w
                    T_after = T_before
                    if not clamped:
                        d_opacity[g] += d_alpha * gval
                        d_power = d_alpha * raw
                        # power = -0.5(a dx^2 + c dy^2) - b dx dy
                        d_conic[g, 0] += d_power * (-0.5 * dx * dx)
                        d_conic[g, 1] += d_power * (-dx * dy)
                        d_conic[g, 2] += d_power * (-0.5 * dy * dy)
                        gx = d_power * (-conic[g, 0] * dx - conic[g, 1] * dy)
                        gy = d_power * (-conic[g, 2] * dy - conic[g, 1] * dx)
                        # dx = px - u  =>  d/du = -gx
                        d_center[g, 0] += -gx
                        d_center[g, 1] += -gy


@njit(cache=True)
def bin_tiles(center, radius, dsort, width, height, tile_size, n_tiles_x, n_tiles_y):
    """Bin primitives into tiles by conservative pixel radius.

    Primitives are visited in global depth order (dsort) so each tile's list
    comes out depth-sorted. Returns (tile_offsets, tile_prims).
    """
    n = dsort.shape[0]
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for idx in range(n):
        g = dsort[idx]
        r = radius[g]
        x0 = int((center[g, 0] - r) // tile_size)
        x1 = int((center[g, 0] + r) // tile_size)
        y0 = int((center[g, 1] - r) // tile_size)
        y1 = int((center[g, 1] + r) // tile_size)
        if x1 < 0 or y1 < 0 or x0 >= n_tiles_x or y0 >= n_tiles_y:
            continue
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, n_tiles_x - 1)
        y1 = min(y1, n_tiles_y - 1)
        for tyy in range(y0, y1 + 1):
            for txx in range(x0, x1 + 1):
                counts[tyy * n_tiles_x + txx + 1] += 1
    offsets = np.cumsum(counts)
    tile_prims = np.empty(offsets[-1], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for idx in range(n):
        g = dsort[idx]
        r = radius[g]
        x0 = int((center[g, 0] - r) // tile_size)
        x1 = int((center[g, 0] + r) // tile_size)
        y0 = int((center[g, 1] - r) // tile_size)
        y1 = int((center[g, 1] + r) // tile_size)
        if x1 < 0 or y1 < 0 or x0 >= n_tiles_x or y0 >= n_tiles_y:
            continue
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, n_tiles_x - 1)
        y1 = min(y1, n_tiles_y - 1)
        for tyy in range(y0, y1 + 1):
            for txx in range(x0, x1 + 1):
                t = tyy * n_tiles_x + txx
                tile_prims[cursor[t]] = g
                cursor[t] += 1
    return offsets, tile_prims


@njit(cache=True)
def zbuffer_points(uv, z, radius, color, width, height, out_depth, out_index,
                   out_color):
    """Nearest-point z-buffer splat used by the synthetic GT generator.

    Each point covers the pixels within `radius` px of its projection; the
    closest point wins per pixel. out_index gets the winning point id (-1
    where uncovered).
    """
    n = uv.shape[0]
    for p in range(n):
        r = radius[p]
        zc = z[p]
        u = uv[p, 0]
        v = uv[p, 1]
        c0 = max(int(u - r), 0)
        c1 = min(int(u + r) + 1, width)
        r0 = max(int(v - r), 0)
        r1 = min(int(v + r) + 1, height)
        for row in range(r0, r1):
            for col in range(c0, c1):
                dx = col + 0.5 - u
                dy = row + 0.5 - v
                if dx * dx + dy * dy > r * r:
                    continue
                if zc < out_depth[row, col]:
                    out_depth[row, col] = zc
                    out_index[row, col] = p
                    out_color[row, col, 0] = color[p, 0]
                    out_color[row, col, 1] = color[p, 1]
                    out_color[row, col, 2] = color[p, 2]
