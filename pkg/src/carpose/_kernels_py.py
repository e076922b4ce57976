"""Pure-Python fallback for the compiled kernels.

Must stay arithmetically identical to ``_kernels.pyx``: same expressions,
same evaluation order, so the two backends agree bit for bit.
"""

import numpy as np

EPS = 1e-9
MIN_AREA = 1e-12


def _setup(xy, tri, height):
    a, b, c = (int(i) for i in tri)
    x0, y0 = float(xy[a, 0]), float(xy[a, 1])
    x1, y1 = float(xy[b, 0]), float(xy[b, 1])
    x2, y2 = float(xy[c, 0]), float(xy[c, 1])
    area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    if not (abs(area2) > MIN_AREA):
        return None
    order = [a, b, c]
    if area2 < 0:
        x1, x2 = x2, x1
        y1, y2 = y2, y1
        order = [a, c, b]
        area2 = -area2
    ymin = min(y0, y1, y2)
    ymax = max(y0, y1, y2)
    r0 = max(np.ceil(ymin - 0.5 - EPS), 0.0)
    r1 = min(np.floor(ymax - 0.5 + EPS), height - 1.0)
    if r0 > r1:
        return None
    return (x0, y0, x1, y1, x2, y2, area2), order, int(r0), int(r1)


def _row_spans(v, rows, width):
    x0, y0, x1, y1, x2, y2, _ = v
    yc = rows + 0.5
    lo = np.full(rows.shape, -np.inf)
    hi = np.full(rows.shape, np.inf)
    ok = np.ones(rows.shape, dtype=bool)
    for ax, ay, bx, by in ((x0, y0, x1, y1), (x1, y1, x2, y2), (x2, y2, x0, y0)):
        dy = by - ay
        dx = bx - ax
        if dy > 0:
            hi = np.minimum(hi, ax + dx * (yc - ay) / dy)
        elif dy < 0:
            lo = np.maximum(lo, ax + dx * (yc - ay) / dy)
        else:
            ok &= ~(dx * (yc - ay) < 0)
    c0 = np.maximum(np.ceil(lo - 0.5 - EPS), 0.0)
    c1 = np.minimum(np.floor(hi - 0.5 + EPS), width - 1.0)
    ok &= c0 <= c1
    return ok, c0, c1


def fill_triangles(xy, tris, out):
    height, width = out.shape
    for tri in tris:
        s = _setup(xy, tri, height)
        if s is None:
            continue
        v, _, r0, r1 = s
        rows = np.arange(r0, r1 + 1, dtype=np.float64)
        ok, c0, c1 = _row_spans(v, rows, width)
        for i, good, a, b in zip(range(r0, r1 + 1), ok, c0, c1):
            if good:
                out[i, int(a):int(b) + 1] = 1


def zbuffer_triangles(xy, inv_depth, tris, instance_id, depth, ids):
    height, width = depth.shape
    for tri in tris:
        s = _setup(xy, tri, height)
        if s is None:
            continue
        v, order, r0, r1 = s
        x0, y0, x1, y1, x2, y2, area2 = v
        iz0, iz1, iz2 = (float(inv_depth[k]) for k in order)
        rows = np.arange(r0, r1 + 1, dtype=np.float64)
        ok, c0, c1 = _row_spans(v, rows, width)
        for i, good, a, b in zip(range(r0, r1 + 1), ok, c0, c1):
            if not good:
                continue
            py = i + 0.5
            j0, j1 = int(a), int(b) + 1
            px = np.arange(j0, j1, dtype=np.float64) + 0.5
            w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area2
            w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area2
            w2 = ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)) / area2
            iz = w0 * iz0 + w1 * iz1 + w2 * iz2
            pos = iz > 0
            z = np.full(iz.shape, np.inf)
            z[pos] = 1.0 / iz[pos]
            row_depth = depth[i, j0:j1]
            win = pos & (z < row_depth)
            row_depth[win] = z[win]
            ids[i, j0:j1][win] = instance_id


def gauss_newton_betas(betas, dv, rho, iterations, step_tol):
    """Scalar mirror of the compiled kernel; see ``_kernels.pyx``."""
    npairs, nb = dv.shape[0], dv.shape[1]
    if betas.shape[0] != nb or rho.shape[0] != npairs:
        raise ValueError("unsupported beta system shape")
    dvl = dv.tolist()
    rl = rho.tolist()
    bl = betas.tolist()
    for it in range(iterations):
        J = []
        r = []
        for p in range(npairs):
            d = []
            for k in range(3):
                acc = 0.0
                for i in range(nb):
                    acc = acc + bl[i] * dvl[p][i][k]
                d.append(acc)
            r.append(d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - rl[p])
            J.append([2.0 * (dvl[p][i][0] * d[0] + dvl[p][i][1] * d[1] + dvl[p][i][2] * d[2])
                      for i in range(nb)])
        A = [[0.0] * nb for _ in range(nb)]
        b = [0.0] * nb
        for i in range(nb):
            for j in range(nb):
                acc = 0.0
                for p in range(npairs):
                    acc = acc + J[p][i] * J[p][j]
                A[i][j] = acc
            acc = 0.0
            for p in range(npairs):
                acc = acc + J[p][i] * r[p]
            b[i] = -acc
        for k in range(nb):
            piv = k
            big = abs(A[k][k])
            for i in range(k + 1, nb):
                if abs(A[i][k]) > big:
                    big = abs(A[i][k])
                    piv = i
            if not big > 0.0:
                betas[:] = bl
                return it
            if piv != k:
                A[k], A[piv] = A[piv], A[k]
                b[k], b[piv] = b[piv], b[k]
            for i in range(k + 1, nb):
                f = A[i][k] / A[k][k]
                for j in range(k, nb):
                    A[i][j] = A[i][j] - f * A[k][j]
                b[i] = b[i] - f * b[k]
        x = [0.0] * nb
        amax = 0.0
        for i in range(nb - 1, -1, -1):
            acc = b[i]
            for j in range(i + 1, nb):
                acc = acc - A[i][j] * x[j]
            x[i] = acc / A[i][i]
            if not abs(x[i]) <= 1.7976931348623157e308:
                betas[:] = bl
                return it
            if abs(x[i]) > amax:
                amax = abs(x[i])
        bl = [bl[i] + x[i] for i in range(nb)]
        if amax < step_tol:
            betas[:] = bl
            return it + 1
    betas[:] = bl
    return iterations
