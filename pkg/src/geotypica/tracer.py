"""Numba ray-tracing kernels: BVH build, traversal, Lambert shading.

The BVH is a top-down median split on the widest centroid axis over a
Morton-presorted triangle order; traversal pops the nearer child first and
prunes on the best hit so far. Shadow tests use an early-exit any-hit walk.
All kernels are deterministic and embarrassingly parallel over pixels; the
output is bitwise identical for any worker count because each pixel writes
only its own result.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

LEAF_SIZE = 8
_T_MIN = 1e-7
_SHADOW_BIAS = 1e-3


def morton_order(centroids: np.ndarray) -> np.ndarray:
    """Spatial presort of triangle centroids (30-bit Morton codes)."""
    lo = centroids.min(axis=0)
    hi = centroids.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    q = np.clip(((centroids - lo) / span * 1023.0), 0, 1023).astype(np.uint32)

    def spread(x):
        x = x.astype(np.uint64)
        x = (x | (x << np.uint64(16))) & np.uint64(0x030000FF)
        x = (x | (x << np.uint64(8))) & np.uint64(0x0300F00F)
        x = (x | (x << np.uint64(4))) & np.uint64(0x030C30C3)
        x = (x | (x << np.uint64(2))) & np.uint64(0x09249249)
        return x

    code = spread(q[:, 0]) | (spread(q[:, 1]) << np.uint64(1)) | (spread(q[:, 2]) << np.uint64(2))
    return np.argsort(code, kind="stable").astype(np.int32)


@njit(cache=True)
def _build_bvh(tri_lo, tri_hi, cen, order):  # pragma: no cover - compiled
    m = order.shape[0]
    max_nodes = 4 * (m // LEAF_SIZE + 2)
    node_lo = np.empty((max_nodes, 3), np.float64)
    node_hi = np.empty((max_nodes, 3), np.float64)
    node_left = np.full(max_nodes, -1, np.int32)
    node_start = np.zeros(max_nodes, np.int32)
    node_count = np.zeros(max_nodes, np.int32)

    stack = np.empty((64 + m, 3), np.int64)
    nnodes = 1
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m
    sp = 1
    tmp = np.empty(m, np.int32)
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        lo = stack[sp, 1]
        hi = stack[sp, 2]
        for k in range(3):
            node_lo[node, k] = 1e300
            node_hi[node, k] = -1e300
        for t in range(lo, hi):
            ti = order[t]
            for k in range(3):
                if tri_lo[ti, k] < node_lo[node, k]:
                    node_lo[node, k] = tri_lo[ti, k]
                if tri_hi[ti, k] > node_hi[node, k]:
                    node_hi[node, k] = tri_hi[ti, k]
        if hi - lo <= LEAF_SIZE:
            node_start[node] = lo
            node_count[node] = hi - lo
            continue
        clo0 = 1e300; chi0 = -1e300
        clo1 = 1e300; chi1 = -1e300
        clo2 = 1e300; chi2 = -1e300
        for t in range(lo, hi):
            ti = order[t]
            c0 = cen[ti, 0]; c1 = cen[ti, 1]; c2 = cen[ti, 2]
            if c0 < clo0: clo0 = c0
            if c0 > chi0: chi0 = c0
            if c1 < clo1: clo1 = c1
            if c1 > chi1: chi1 = c1
            if c2 < clo2: clo2 = c2
            if c2 > chi2: chi2 = c2
        ext0 = chi0 - clo0; ext1 = chi1 - clo1; ext2 = chi2 - clo2
        axis = 0
        best = ext0
        if ext1 > best:
            best = ext1; axis = 1
        if ext2 > best:
            best = ext2; axis = 2
        if best <= 0.0:
            node_start[node] = lo
            node_count[node] = hi - lo
            continue
        if axis == 0:
            pivot = 0.5 * (clo0 + chi0)
        elif axis == 1:
            pivot = 0.5 * (clo1 + chi1)
        else:
            pivot = 0.5 * (clo2 + chi2)
        a = 0
        b = hi - lo
        for t in range(lo, hi):
            ti = order[t]
            if cen[ti, axis] < pivot:
                tmp[a] = ti
                a += 1
            else:
                b -= 1
                tmp[b] = ti
        if a == 0 or a == hi - lo:
            a = (hi - lo) // 2
        for t in range(hi - lo):
            order[lo + t] = tmp[t]
        mid = lo + a
        l = nnodes
        nnodes += 2
        node_left[node] = l
        stack[sp, 0] = l; stack[sp, 1] = lo; stack[sp, 2] = mid; sp += 1
        stack[sp, 0] = l + 1; stack[sp, 1] = mid; stack[sp, 2] = hi; sp += 1
    return (node_lo[:nnodes].copy(), node_hi[:nnodes].copy(), node_left[:nnodes].copy(),
            node_start[:nnodes].copy(), node_count[:nnodes].copy())


@njit(inline="always")
def _ray_tri(ox, oy, oz, dx, dy, dz, V0, E1, E2, ti, t_max):  # pragma: no cover
    e1x = E1[ti, 0]; e1y = E1[ti, 1]; e1z = E1[ti, 2]
    e2x = E2[ti, 0]; e2y = E2[ti, 1]; e2z = E2[ti, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if -1e-12 < det < 1e-12:
        return -1.0
    inv = 1.0 / det
    tx = ox - V0[ti, 0]; ty = oy - V0[ti, 1]; tz = oz - V0[ti, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t < _T_MIN or t >= t_max:
        return -1.0
    return t


@njit(inline="always")
def _slab(ox, oy, oz, ix, iy, iz, node_lo, node_hi, node, t_best):  # pragma: no cover
    t1 = (node_lo[node, 0] - ox) * ix
    t2 = (node_hi[node, 0] - ox) * ix
    tmin = min(t1, t2)
    tmax = max(t1, t2)
    t1 = (node_lo[node, 1] - oy) * iy
    t2 = (node_hi[node, 1] - oy) * iy
    tmin = max(tmin, min(t1, t2))
    tmax = min(tmax, max(t1, t2))
    t1 = (node_lo[node, 2] - oz) * iz
    t2 = (node_hi[node, 2] - oz) * iz
    tmin = max(tmin, min(t1, t2))
    tmax = min(tmax, max(t1, t2))
    if tmax < tmin or tmax < 0.0 or tmin > t_best:
        return -1.0
    return max(tmin, 0.0)


@njit(cache=True)
def _closest_hit(ox, oy, oz, dx, dy, dz, node_lo, node_hi, node_left,
                 node_start, node_count, order, V0, E1, E2):  # pragma: no cover
    ix = 1.0 / dx if dx != 0.0 else 1e300
    iy = 1.0 / dy if dy != 0.0 else 1e300
    iz = 1.0 / dz if dz != 0.0 else 1e300
    stack = np.empty(64, np.int32)
    stack[0] = 0
    sp = 1
    best_t = 1e300
    best = -1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        l = node_left[node]
        if l < 0:
            s = node_start[node]
            for t in range(s, s + node_count[node]):
                ti = order[t]
                tt = _ray_tri(ox, oy, oz, dx, dy, dz, V0, E1, E2, ti, best_t)
                if tt > 0.0:
                    best_t = tt
                    best = ti
        else:
            r = l + 1
            dl = _slab(ox, oy, oz, ix, iy, iz, node_lo, node_hi, l, best_t)
            dr = _slab(ox, oy, oz, ix, iy, iz, node_lo, node_hi, r, best_t)
            if dl >= 0.0 and dr >= 0.0:
                if dl <= dr:
                    stack[sp] = r; sp += 1
                    stack[sp] = l; sp += 1
                else:
                    stack[sp] = l; sp += 1
                    stack[sp] = r; sp += 1
            elif dl >= 0.0:
                stack[sp] = l; sp += 1
            elif dr >= 0.0:
                stack[sp] = r; sp += 1
    return best_t, best


@njit(cache=True)
def _any_hit(ox, oy, oz, dx, dy, dz, node_lo, node_hi, node_left,
             node_start, node_count, order, V0, E1, E2):  # pragma: no cover
    ix = 1.0 / dx if dx != 0.0 else 1e300
    iy = 1.0 / dy if dy != 0.0 else 1e300
    iz = 1.0 / dz if dz != 0.0 else 1e300
    stack = np.empty(64, np.int32)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _slab(ox, oy, oz, ix, iy, iz, node_lo, node_hi, node, 1e300) < 0.0:
            continue
        l = node_left[node]
        if l < 0:
            s = node_start[node]
            for t in range(s, s + node_count[node]):
                ti = order[t]
                if _ray_tri(ox, oy, oz, dx, dy, dz, V0, E1, E2, ti, 1e300) > 0.0:
                    return True
        else:
            stack[sp] = l; sp += 1
            stack[sp] = l + 1; sp += 1
    return False


@njit(cache=True)
def _shade(ti, hx, hy, hz, ddx, ddy, ddz, sun_x, sun_y, sun_z,
           node_lo, node_hi, node_left, node_start, node_count, order,
           V0, E1, E2, tri_material, inst_albedo, inst_tex, inst_scale,
           tex_data, tex_off, tex_w, tex_h,
           e_r, e_g, e_b, ambient):  # pragma: no cover
    """Linear radiance (r, g, b) at a hit point."""
    nx = E1[ti, 1] * E2[ti, 2] - E1[ti, 2] * E2[ti, 1]
    ny = E1[ti, 2] * E2[ti, 0] - E1[ti, 0] * E2[ti, 2]
    nz = E1[ti, 0] * E2[ti, 1] - E1[ti, 1] * E2[ti, 0]
    nlen = math.sqrt(nx * nx + ny * ny + nz * nz)
    if nlen == 0.0:
        return 0.0, 0.0, 0.0
    nx /= nlen; ny /= nlen; nz /= nlen
    # face the incoming ray
    if nx * ddx + ny * ddy + nz * ddz > 0.0:
        nx = -nx; ny = -ny; nz = -nz

    cos_sun = nx * sun_x + ny * sun_y + nz * sun_z
    vis = 0.0
    if cos_sun > 0.0:
        ox = hx + nx * _SHADOW_BIAS
        oy = hy + ny * _SHADOW_BIAS
        oz = hz + nz * _SHADOW_BIAS
        if not _any_hit(ox, oy, oz, sun_x, sun_y, sun_z, node_lo, node_hi,
                        node_left, node_start, node_count, order, V0, E1, E2):
            vis = 1.0
    direct = max(0.0, cos_sun) * vis

    mat = tri_material[ti]
    t_id = inst_tex[mat]
    if t_id < 0:
        ar = inst_albedo[mat, 0]
        ag = inst_albedo[mat, 1]
        ab = inst_albedo[mat, 2]
    else:
        scale = inst_scale[mat]
        u = (hx / scale) % 1.0
        v = (hy / scale) % 1.0
        w = tex_w[t_id]
        h = tex_h[t_id]
        px = min(int(u * w), w - 1)
        py = min(int(v * h), h - 1)
        base = tex_off[t_id] + (py * w + px) * 3
        ar = tex_data[base]
        ag = tex_data[base + 1]
        ab = tex_data[base + 2]

    inv_pi = 1.0 / math.pi
    lr = ar * inv_pi * e_r * (direct + ambient)
    lg = ag * inv_pi * e_g * (direct + ambient)
    lb = ab * inv_pi * e_b * (direct + ambient)
    return lr, lg, lb


@njit(parallel=True, cache=True)
def render_kernel(W, H, cam_center, cam_rot, focal_px,
                  node_lo, node_hi, node_left, node_start, node_count, order,
                  V0, E1, E2, tri_class, tri_material,
                  inst_albedo, inst_tex, inst_scale,
                  tex_data, tex_off, tex_w, tex_h,
                  sun_dir, sun_irr, ambient, exposure, sky_rgb,
                  supersample, keep_linear,
                  out_rgb, out_label, out_linear):  # pragma: no cover - compiled
    cx = cam_center[0]; cy = cam_center[1]; cz = cam_center[2]
    r00 = cam_rot[0, 0]; r01 = cam_rot[0, 1]; r02 = cam_rot[0, 2]
    r10 = cam_rot[1, 0]; r11 = cam_rot[1, 1]; r12 = cam_rot[1, 2]
    r20 = cam_rot[2, 0]; r21 = cam_rot[2, 1]; r22 = cam_rot[2, 2]
    sx = sun_dir[0]; sy = sun_dir[1]; sz = sun_dir[2]
    e_r = sun_irr[0]; e_g = sun_irr[1]; e_b = sun_irr[2]

    for j in prange(H):
        for i in range(W):
            # center sample drives labels and the linear buffer
            px = i + 0.5 - W / 2.0
            py = H / 2.0 - j - 0.5
            dx = r00 * px + r01 * py + r02 * focal_px
            dy = r10 * px + r11 * py + r12 * focal_px
            dz = r20 * px + r21 * py + r22 * focal_px
            dn = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= dn; dy /= dn; dz /= dn
            t, ti = _closest_hit(cx, cy, cz, dx, dy, dz, node_lo, node_hi, node_left,
                                 node_start, node_count, order, V0, E1, E2)
            if ti < 0:
                out_label[j, i] = 0
                out_rgb[j, i, 0] = sky_rgb[0]
                out_rgb[j, i, 1] = sky_rgb[1]
                out_rgb[j, i, 2] = sky_rgb[2]
                if keep_linear:
                    out_linear[j, i, 0] = 0.0
                    out_linear[j, i, 1] = 0.0
                    out_linear[j, i, 2] = 0.0
                continue
            out_label[j, i] = tri_class[ti]
            hx = cx + dx * t; hy = cy + dy * t; hz = cz + dz * t
            lr, lg, lb = _shade(ti, hx, hy, hz, dx, dy, dz, sx, sy, sz,
                                node_lo, node_hi, node_left, node_start, node_count,
                                order, V0, E1, E2, tri_material, inst_albedo,
                                inst_tex, inst_scale, tex_data, tex_off, tex_w, tex_h,
                                e_r, e_g, e_b, ambient)
            if keep_linear:
                out_linear[j, i, 0] = lr
                out_linear[j, i, 1] = lg
                out_linear[j, i, 2] = lb
            if supersample:
                acc_r = 0.0; acc_g = 0.0; acc_b = 0.0
                for su in range(2):
                    for sv in range(2):
                        qx = i + 0.25 + 0.5 * su - W / 2.0
                        qy = H / 2.0 - j - 0.25 - 0.5 * sv
                        ex = r00 * qx + r01 * qy + r02 * focal_px
                        ey = r10 * qx + r11 * qy + r12 * focal_px
                        ez = r20 * qx + r21 * qy + r22 * focal_px
                        en = math.sqrt(ex * ex + ey * ey + ez * ez)
                        ex /= en; ey /= en; ez /= en
                        t2, ti2 = _closest_hit(cx, cy, cz, ex, ey, ez, node_lo, node_hi,
                                               node_left, node_start, node_count, order,
                                               V0, E1, E2)
                        if ti2 < 0:
                            acc_r += sky_rgb[0] / 255.0 / exposure if exposure > 0 else 0.0
                            acc_g += sky_rgb[1] / 255.0 / exposure if exposure > 0 else 0.0
                            acc_b += sky_rgb[2] / 255.0 / exposure if exposure > 0 else 0.0
                            continue
                        qhx = cx + ex * t2; qhy = cy + ey * t2; qhz = cz + ez * t2
                        sr, sg, sb = _shade(ti2, qhx, qhy, qhz, ex, ey, ez, sx, sy, sz,
                                            node_lo, node_hi, node_left, node_start,
                                            node_count, order, V0, E1, E2, tri_material,
                                            inst_albedo, inst_tex, inst_scale, tex_data,
                                            tex_off, tex_w, tex_h, e_r, e_g, e_b, ambient)
                        acc_r += sr; acc_g += sg; acc_b += sb
                lr = acc_r / 4.0; lg = acc_g / 4.0; lb = acc_b / 4.0
            vr = lr * exposure * 255.0
            vg = lg * exposure * 255.0
            vb = lb * exposure * 255.0
            out_rgb[j, i, 0] = np.uint8(min(max(vr + 0.5, 0.0), 255.0))
            out_rgb[j, i, 1] = np.uint8(min(max(vg + 0.5, 0.0), 255.0))
            out_rgb[j, i, 2] = np.uint8(min(max(vb + 0.5, 0.0), 255.0))


@njit(parallel=True, cache=True)
def trace_rays_kernel(origins, dirs, node_lo, node_hi, node_left, node_start,
                      node_count, order, V0, E1, E2, out_t, out_tri):  # pragma: no cover
    n = origins.shape[0]
    for k in prange(n):
        t, ti = _closest_hit(origins[k, 0], origins[k, 1], origins[k, 2],
                             dirs[k, 0], dirs[k, 1], dirs[k, 2],
                             node_lo, node_hi, node_left, node_start, node_count,
                             order, V0, E1, E2)
        out_t[k] = t
        out_tri[k] = ti


class BVH:
    """Acceleration structure over a triangle soup."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if len(triangles) == 0:
            raise ValueError("cannot build a BVH over zero triangles")
        a = vertices[triangles[:, 0]]
        b = vertices[triangles[:, 1]]
        c = vertices[triangles[:, 2]]
        self.v0 = np.ascontiguousarray(a)
        self.e1 = np.ascontiguousarray(b - a)
        self.e2 = np.ascontiguousarray(c - a)
        tri_lo = np.minimum(np.minimum(a, b), c)
        tri_hi = np.maximum(np.maximum(a, b), c)
        cen = (tri_lo + tri_hi) / 2.0
        self.order = morton_order(cen)
        (self.node_lo, self.node_hi, self.node_left,
         self.node_start, self.node_count) = _build_bvh(tri_lo, tri_hi, cen, self.order)

    def kernel_args(self):
        return (self.node_lo, self.node_hi, self.node_left, self.node_start,
                self.node_count, self.order, self.v0, self.e1, self.e2)

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """Closest hits for a batch of rays; returns (t, triangle_index)."""
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        out_t = np.empty(len(origins), np.float64)
        out_tri = np.empty(len(origins), np.int32)
        trace_rays_kernel(origins, dirs, *self.kernel_args(), out_t, out_tri)
        return out_t, out_tri
