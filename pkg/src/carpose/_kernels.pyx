# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: scanline triangle rasterisation and the EPnP
beta Gauss-Newton refinement.

Arithmetic mirrors ``_kernels_py`` operation for operation so both backends
produce bitwise-identical results (build with -ffp-contract=off).
"""

from libc.math cimport ceil, floor, fabs, INFINITY

cdef double EPS = 1e-9
cdef double MIN_AREA = 1e-12


cdef inline bint _row_span(double x0, double y0, double x1, double y1,
                           double x2, double y2, double yc, int width,
                           int* c0, int* c1) nogil:
    cdef double lo = -INFINITY
    cdef double hi = INFINITY
    cdef double ax, ay, bx, by, dx, dy, xb, c0d, c1d
    cdef int e
    for e in range(3):
        if e == 0:
            ax = x0; ay = y0; bx = x1; by = y1
        elif e == 1:
            ax = x1; ay = y1; bx = x2; by = y2
        else:
            ax = x2; ay = y2; bx = x0; by = y0
        dy = by - ay
        dx = bx - ax
        if dy > 0:
            xb = ax + dx * (yc - ay) / dy
            if xb < hi:
                hi = xb
        elif dy < 0:
            xb = ax + dx * (yc - ay) / dy
            if xb > lo:
                lo = xb
        else:
            if dx * (yc - ay) < 0:
                return False
    c0d = ceil(lo - 0.5 - EPS)
    c1d = floor(hi - 0.5 + EPS)
    if c0d < 0:
        c0d = 0
    if c1d > width - 1:
        c1d = width - 1
    if c0d > c1d:
        return False
    c0[0] = <int>c0d
    c1[0] = <int>c1d
    return True


cdef inline bint _setup(const double[:, ::1] xy, const int[:, ::1] tris, Py_ssize_t t,
                        int height, double* v, int* r0, int* r1, int* order) nogil:
    # v = [x0, y0, x1, y1, x2, y2, area2]
    cdef int a = tris[t, 0]
    cdef int b = tris[t, 1]
    cdef int c = tris[t, 2]
    cdef double x0 = xy[a, 0], y0 = xy[a, 1]
    cdef double x1 = xy[b, 0], y1 = xy[b, 1]
    cdef double x2 = xy[c, 0], y2 = xy[c, 1]
    cdef double area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    cdef double tmp, ymin, ymax, r0d, r1d
    if not (fabs(area2) > MIN_AREA):
        return False
    order[0] = a; order[1] = b; order[2] = c
    if area2 < 0:
        tmp = x1; x1 = x2; x2 = tmp
        tmp = y1; y1 = y2; y2 = tmp
        order[1] = c; order[2] = b
        area2 = -area2
    ymin = y0
    if y1 < ymin:
        ymin = y1
    if y2 < ymin:
        ymin = y2
    ymax = y0
    if y1 > ymax:
        ymax = y1
    if y2 > ymax:
        ymax = y2
    r0d = ceil(ymin - 0.5 - EPS)
    r1d = floor(ymax - 0.5 + EPS)
    if r0d < 0:
        r0d = 0
    if r1d > height - 1:
        r1d = height - 1
    if r0d > r1d:
        return False
    r0[0] = <int>r0d
    r1[0] = <int>r1d
    v[0] = x0; v[1] = y0; v[2] = x1; v[3] = y1; v[4] = x2; v[5] = y2; v[6] = area2
    return True


def fill_triangles(const double[:, ::1] xy, const int[:, ::1] tris, unsigned char[:, ::1] out):
    """Set ``out[i, j] = 1`` for every pixel centre covered by a triangle."""
    cdef int height = out.shape[0]
    cdef int width = out.shape[1]
    cdef double v[7]
    cdef int order[3]
    cdef int r0, r1, c0, c1, i, j
    cdef Py_ssize_t t
    with nogil:
        for t in range(tris.shape[0]):
            if not _setup(xy, tris, t, height, v, &r0, &r1, order):
                continue
            for i in range(r0, r1 + 1):
                if not _row_span(v[0], v[1], v[2], v[3], v[4], v[5], i + 0.5, width, &c0, &c1):
                    continue
                for j in range(c0, c1 + 1):
                    out[i, j] = 1


def zbuffer_triangles(const double[:, ::1] xy, const double[::1] inv_depth,
                      const int[:, ::1] tris, int instance_id,
                      double[:, ::1] depth, int[:, ::1] ids):
    """Depth-tested fill with perspective-correct depth (1/z interpolated)."""
    cdef int height = depth.shape[0]
    cdef int width = depth.shape[1]
    cdef double v[7]
    cdef int order[3]
    cdef int r0, r1, c0, c1, i, j
    cdef Py_ssize_t t
    cdef double x0, y0, x1, y1, x2, y2, area2, iz0, iz1, iz2
    cdef double px, py, w0, w1, w2, iz, z
    with nogil:
        for t in range(tris.shape[0]):
            if not _setup(xy, tris, t, height, v, &r0, &r1, order):
                continue
            x0 = v[0]; y0 = v[1]; x1 = v[2]; y1 = v[3]; x2 = v[4]; y2 = v[5]; area2 = v[6]
            iz0 = inv_depth[order[0]]
            iz1 = inv_depth[order[1]]
            iz2 = inv_depth[order[2]]
            for i in range(r0, r1 + 1):
                py = i + 0.5
                if not _row_span(x0, y0, x1, y1, x2, y2, py, width, &c0, &c1):
                    continue
                for j in range(c0, c1 + 1):
                    px = j + 0.5
                    w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area2
                    w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area2
                    w2 = ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)) / area2
                    iz = w0 * iz0 + w1 * iz1 + w2 * iz2
                    if iz <= 0:
                        continue
                    z = 1.0 / iz
                    if z < depth[i, j]:
                        depth[i, j] = z
                        ids[i, j] = instance_id


DEF MAX_PAIRS = 6
DEF MAX_BETAS = 4


def gauss_newton_betas(double[::1] betas, const double[:, :, ::1] dv, const double[::1] rho,
                       int iterations, double step_tol):
    """Refine ``betas`` in place to fit ``|sum_i betas[i] dv[p, i]|^2 = rho[p]``.

    Normal equations solved by Gaussian elimination with partial pivoting;
    stops early on a singular system, a non-finite step or a step whose
    largest component is below ``step_tol``. Returns the iteration count.
    """
    cdef Py_ssize_t npairs = dv.shape[0], nb = dv.shape[1]
    cdef double d[MAX_PAIRS][3]
    cdef double r[MAX_PAIRS]
    cdef double J[MAX_PAIRS][MAX_BETAS]
    cdef double A[MAX_BETAS][MAX_BETAS]
    cdef double b[MAX_BETAS]
    cdef double x[MAX_BETAS]
    cdef double acc, f, big, tmp, amax
    cdef Py_ssize_t p, i, j, k, piv
    cdef int it
    if npairs > MAX_PAIRS or nb > MAX_BETAS or betas.shape[0] != nb or rho.shape[0] != npairs:
        raise ValueError("unsupported beta system shape")
    for it in range(iterations):
        for p in range(npairs):
            for k in range(3):
                acc = 0.0
                for i in range(nb):
                    acc = acc + betas[i] * dv[p, i, k]
                d[p][k] = acc
            r[p] = d[p][0] * d[p][0] + d[p][1] * d[p][1] + d[p][2] * d[p][2] - rho[p]
            for i in range(nb):
                J[p][i] = 2.0 * (dv[p, i, 0] * d[p][0] + dv[p, i, 1] * d[p][1] + dv[p, i, 2] * d[p][2])
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
            big = fabs(A[k][k])
            for i in range(k + 1, nb):
                if fabs(A[i][k]) > big:
                    big = fabs(A[i][k])
                    piv = i
            if not big > 0.0:
                return it
            if piv != k:
                for j in range(nb):
                    tmp = A[k][j]; A[k][j] = A[piv][j]; A[piv][j] = tmp
                tmp = b[k]; b[k] = b[piv]; b[piv] = tmp
            for i in range(k + 1, nb):
                f = A[i][k] / A[k][k]
                for j in range(k, nb):
                    A[i][j] = A[i][j] - f * A[k][j]
                b[i] = b[i] - f * b[k]
        amax = 0.0
        for i in range(nb - 1, -1, -1):
            acc = b[i]
            for j in range(i + 1, nb):
                acc = acc - A[i][j] * x[j]
            x[i] = acc / A[i][i]
            if not fabs(x[i]) <= 1.7976931348623157e308:
                return it
            if fabs(x[i]) > amax:
                amax = fabs(x[i])
        for i in range(nb):
            betas[i] = betas[i] + x[i]
        if amax < step_tol:
            return it + 1
    return iterations
