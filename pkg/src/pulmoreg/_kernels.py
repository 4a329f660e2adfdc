"""Compiled inner loops (numba).

Only the loops that are inherently sequential or too large to vectorise live
here: the lower-envelope distance transform and the NGF cost-volume scan.
"""

import numba as nb
import numpy as np

# skip the TBB probe, which warns when the system TBB is too old
nb.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]


@nb.njit(cache=True)
def _dt_line(f, w, out, arg, v, z):
    n = f.shape[0]
    if w == 0.0:
        best = np.inf
        ibest = -1
        for q in range(n):
            if f[q] < best:
                best = f[q]
                ibest = q
        for q in range(n):
            out[q] = best
            arg[q] = ibest
        return

    k = -1
    for q in range(n):
        fq = f[q]
        if not fq < np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        hq = fq + w * q * q
        s = -np.inf
        while k >= 0:
            p = v[k]
            s = (hq - (f[p] + w * p * p)) / (2.0 * w * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        # an underflowing weight can push the new parabola below all others
        z[k] = s if k > 0 else -np.inf
        z[k + 1] = np.inf

    if k < 0:
        for q in range(n):
            out[q] = np.inf
            arg[q] = -1
        return

    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = f[p] + w * ((q - p) * (q - p))
        arg[q] = p


@nb.njit(cache=True)
def dt_lines(f, w, out, arg):
    """Row-wise min-convolution ``out[i, q] = min_p f[i, p] + w (q - p)^2``.

    ``w`` is expressed per squared index step. Infinite entries never win.
    """
    n = f.shape[1]
    v = np.empty(n, np.int64)
    z = np.empty(n + 1)
    for i in range(f.shape[0]):
        _dt_line(f[i], w, out[i], arg[i], v, z)


@nb.njit(cache=True, parallel=True)
def ngf_cost_volume(nf, nm, centers, patch, disp, out):
    """Mean NGF residual over a patch for every keypoint and displacement.

    ``nf`` and ``nm`` hold unit 4-vectors ``(grad, eta) / ||(grad, eta)||`` so
    the pointwise residual is ``1 - <nf, nm>^2``. Points falling outside
    either volume cost 1.
    """
    nk = centers.shape[0]
    nl = disp.shape[0]
    npatch = patch.shape[0]
    fx, fy, fz = nf.shape[0], nf.shape[1], nf.shape[2]
    mx, my, mz = nm.shape[0], nm.shape[1], nm.shape[2]
    for k in nb.prange(nk):
        fvec = np.zeros((npatch, 4))
        pos = np.zeros((npatch, 3), np.int64)
        ok = np.zeros(npatch, np.bool_)
        for p in range(npatch):
            i = centers[k, 0] + patch[p, 0]
            j = centers[k, 1] + patch[p, 1]
            l = centers[k, 2] + patch[p, 2]
            pos[p, 0] = i
            pos[p, 1] = j
            pos[p, 2] = l
            if 0 <= i < fx and 0 <= j < fy and 0 <= l < fz:
                ok[p] = True
                for c in range(4):
                    fvec[p, c] = nf[i, j, l, c]
        for d in range(nl):
            s = 0.0
            for p in range(npatch):
                if not ok[p]:
                    s += 1.0
                    continue
                i = pos[p, 0] + disp[d, 0]
                j = pos[p, 1] + disp[d, 1]
                l = pos[p, 2] + disp[d, 2]
                if i < 0 or i >= mx or j < 0 or j >= my or l < 0 or l >= mz:
                    s += 1.0
                    continue
                dot = (fvec[p, 0] * nm[i, j, l, 0] + fvec[p, 1] * nm[i, j, l, 1]
                       + fvec[p, 2] * nm[i, j, l, 2] + fvec[p, 3] * nm[i, j, l, 3])
                s += 1.0 - dot * dot
            out[k, d] = s / npatch


@nb.njit(cache=True)
def trilinear_with_gradient(data, origin, spacing, points, vals, grads):
    """Zero-padded trilinear samples of a (nx, ny, nz, c) array and their exact spatial derivative."""
    nx, ny, nz, nc = data.shape
    for n in range(points.shape[0]):
        u = np.empty(3)
        for a in range(3):
            u[a] = (points[n, a] - origin[a]) / spacing[a]
        i0 = int(np.floor(u[0]))
        j0 = int(np.floor(u[1]))
        k0 = int(np.floor(u[2]))
        tx = u[0] - i0
        ty = u[1] - j0
        tz = u[2] - k0
        for c in range(nc):
            vals[n, c] = 0.0
            grads[n, c, 0] = 0.0
            grads[n, c, 1] = 0.0
            grads[n, c, 2] = 0.0
        for di in range(2):
            i = i0 + di
            if i < 0 or i >= nx:
                continue
            wx = tx if di == 1 else 1.0 - tx
            sx = 1.0 if di == 1 else -1.0
            for dj in range(2):
                j = j0 + dj
                if j < 0 or j >= ny:
                    continue
                wy = ty if dj == 1 else 1.0 - ty
                sy = 1.0 if dj == 1 else -1.0
                for dk in range(2):
                    k = k0 + dk
                    if k < 0 or k >= nz:
                        continue
                    wz = tz if dk == 1 else 1.0 - tz
                    sz = 1.0 if dk == 1 else -1.0
                    w = wx * wy * wz
                    gx = sx * wy * wz / spacing[0]
                    gy = sy * wx * wz / spacing[1]
                    gz = sz * wx * wy / spacing[2]
                    for c in range(nc):
                        v = data[i, j, k, c]
                        vals[n, c] += w * v
                        grads[n, c, 0] += gx * v
                        grads[n, c, 1] += gy * v
                        grads[n, c, 2] += gz * v


@nb.njit(cache=True)
def gather_points(flat, index, weights, out):
    """``out[n] = sum_k weights[n, k] * flat[index[n, k]]`` for (m, 3) ``flat``."""
    for n in range(index.shape[0]):
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for k in range(index.shape[1]):
            w = weights[n, k]
            r = index[n, k]
            a0 += w * flat[r, 0]
            a1 += w * flat[r, 1]
            a2 += w * flat[r, 2]
        out[n, 0] = a0
        out[n, 1] = a1
        out[n, 2] = a2


@nb.njit(cache=True)
def scatter_points(vectors, index, weights, out):
    """Adjoint of :func:`gather_points`; accumulates in a fixed sequential order."""
    for n in range(index.shape[0]):
        for k in range(index.shape[1]):
            w = weights[n, k]
            r = index[n, k]
            out[r, 0] += w * vectors[n, 0]
            out[r, 1] += w * vectors[n, 1]
            out[r, 2] += w * vectors[n, 2]


@nb.njit(cache=True)
def _det3(a, b, c):
    return (a[0] * (b[1] * c[2] - b[2] * c[1])
            - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]))


@nb.njit(cache=True)
def vcc_cells(T, h, grad):
    """Sum of ``psi(d)`` over the 64 edge determinants of every cell, with its gradient.

    Returns ``(value, min_d)``; the value is ``inf`` as soon as one ``d <= 0``
    (the gradient is then meaningless). ``grad`` is accumulated in place.
    """
    gx, gy, gz = T.shape[0], T.shape[1], T.shape[2]
    e = np.zeros((3, 4, 3))
    ge = np.zeros((3, 4, 3))
    total = 0.0
    dmin = np.inf
    for i in range(gx - 1):
        for j in range(gy - 1):
            for k in range(gz - 1):
                # edge vectors: axis a, edge index p*2+q over the other two axes
                for p in range(2):
                    for q in range(2):
                        for c in range(3):
                            e[0, p * 2 + q, c] = (T[i + 1, j + p, k + q, c] - T[i, j + p, k + q, c]) / h[0]
                            e[1, p * 2 + q, c] = (T[i + p, j + 1, k + q, c] - T[i + p, j, k + q, c]) / h[1]
                            e[2, p * 2 + q, c] = (T[i + p, j + q, k + 1, c] - T[i + p, j + q, k, c]) / h[2]
                        e[0, p * 2 + q, 0] += 1.0
                        e[1, p * 2 + q, 1] += 1.0
                        e[2, p * 2 + q, 2] += 1.0
                ge[:, :, :] = 0.0
                for a in range(4):
                    for b in range(4):
                        for c in range(4):
                            d = _det3(e[0, a], e[1, b], e[2, c])
                            if d < dmin:
                                dmin = d
                            if d <= 0.0:
                                return np.inf, dmin
                            total += (d - 1.0) * (d - 1.0) / d
                            w = 1.0 - 1.0 / (d * d)
                            # d det / d column = cross product of the other two columns
                            v0, v1, v2 = e[0, a], e[1, b], e[2, c]
                            ge[0, a, 0] += w * (v1[1] * v2[2] - v1[2] * v2[1])
                            ge[0, a, 1] += w * (v1[2] * v2[0] - v1[0] * v2[2])
                            ge[0, a, 2] += w * (v1[0] * v2[1] - v1[1] * v2[0])
                            ge[1, b, 0] += w * (v2[1] * v0[2] - v2[2] * v0[1])
                            ge[1, b, 1] += w * (v2[2] * v0[0] - v2[0] * v0[2])
                            ge[1, b, 2] += w * (v2[0] * v0[1] - v2[1] * v0[0])
                            ge[2, c, 0] += w * (v0[1] * v1[2] - v0[2] * v1[1])
                            ge[2, c, 1] += w * (v0[2] * v1[0] - v0[0] * v1[2])
                            ge[2, c, 2] += w * (v0[0] * v1[1] - v0[1] * v1[0])
                for p in range(2):
                    for q in range(2):
                        for c in range(3):
                            g0 = ge[0, p * 2 + q, c] / h[0]
                            grad[i + 1, j + p, k + q, c] += g0
                            grad[i, j + p, k + q, c] -= g0
                            g1 = ge[1, p * 2 + q, c] / h[1]
                            grad[i + p, j + 1, k + q, c] += g1
                            grad[i + p, j, k + q, c] -= g1
                            g2 = ge[2, p * 2 + q, c] / h[2]
                            grad[i + p, j + q, k + 1, c] += g2
                            grad[i + p, j + q, k, c] -= g2
    return total, dmin
