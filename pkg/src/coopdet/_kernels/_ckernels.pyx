# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rotated-rectangle kernels; same contract as ``_pykernels``."""

import numpy as np

from libc.math cimport cos, sin, sqrt, fabs


cdef void _corners(double x, double y, double l, double w, double yaw, double* out) noexcept nogil:
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double hl = 0.5 * l, hw = 0.5 * w
    cdef double px[4]
    cdef double py[4]
    px[0] = hl; py[0] = hw
    px[1] = -hl; py[1] = hw
    px[2] = -hl; py[2] = -hw
    px[3] = hl; py[3] = -hw
    cdef int i
    for i in range(4):
        out[2 * i] = x + c * px[i] - s * py[i]
        out[2 * i + 1] = y + s * px[i] + c * py[i]


cdef int _clip(double* poly, int n, double ax, double ay, double bx, double by,
               double* out) noexcept nogil:
    cdef int i, m = 0
    cdef double ex = bx - ax, ey = by - ay
    cdef double px, py, qx, qy, sp, sq, t
    for i in range(n):
        px = poly[2 * i]; py = poly[2 * i + 1]
        qx = poly[2 * ((i + 1) % n)]; qy = poly[2 * ((i + 1) % n) + 1]
        sp = ex * (py - ay) - ey * (px - ax)
        sq = ex * (qy - ay) - ey * (qx - ax)
        if sp >= 0:
            out[2 * m] = px; out[2 * m + 1] = py
            m += 1
        if (sp >= 0) != (sq >= 0):
            t = sp / (sp - sq)
            out[2 * m] = px + t * (qx - px)
            out[2 * m + 1] = py + t * (qy - py)
            m += 1
    return m


cdef double _area(double* poly, int n) noexcept nogil:
    cdef double acc = 0.0
    cdef int i, j
    for i in range(n):
        j = (i + 1) % n
        acc += poly[2 * i] * poly[2 * j + 1] - poly[2 * j] * poly[2 * i + 1]
    return 0.5 * fabs(acc)


cdef double _intersection(double ax, double ay, double al, double aw, double ayaw,
                          double bx, double by, double bl, double bw, double byaw) noexcept nogil:
    cdef double reach = 0.5 * (sqrt(al * al + aw * aw) + sqrt(bl * bl + bw * bw))
    cdef double dx = ax - bx, dy = ay - by
    if dx * dx + dy * dy > reach * reach:
        return 0.0
    cdef double buf_a[32]
    cdef double buf_b[32]
    cdef double clip[8]
    cdef double* src = buf_a
    cdef double* dst = buf_b
    cdef double* tmp
    cdef int n = 4, i
    _corners(ax, ay, al, aw, ayaw, src)
    _corners(bx, by, bl, bw, byaw, clip)
    for i in range(4):
        if n == 0:
            return 0.0
        n = _clip(src, n, clip[2 * i], clip[2 * i + 1],
                  clip[2 * ((i + 1) % 4)], clip[2 * ((i + 1) % 4) + 1], dst)
        tmp = src; src = dst; dst = tmp
    if n < 3:
        return 0.0
    return _area(src, n)


cdef double _iou(double[:, ::1] a, Py_ssize_t i, double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double inter = _intersection(a[i, 0], a[i, 1], a[i, 2], a[i, 3], a[i, 4],
                                      b[j, 0], b[j, 1], b[j, 2], b[j, 3], b[j, 4])
    if inter <= 0.0:
        return 0.0
    cdef double r = inter / (a[i, 2] * a[i, 3] + b[j, 2] * b[j, 3] - inter)
    if r < 0.0:
        return 0.0
    if r > 1.0:
        return 1.0
    return r


def iou_matrix(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 5)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((av.shape[0], bv.shape[0]))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(av.shape[0]):
            for j in range(bv.shape[0]):
                ov[i, j] = _iou(av, i, bv, j)
    return out


def intersection_matrix(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 5)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((av.shape[0], bv.shape[0]))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(av.shape[0]):
            for j in range(bv.shape[0]):
                ov[i, j] = _intersection(av[i, 0], av[i, 1], av[i, 2], av[i, 3], av[i, 4],
                                         bv[j, 0], bv[j, 1], bv[j, 2], bv[j, 3], bv[j, 4])
    return out


def nms_keep(boxes, double threshold):
    cdef double[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 5)
    cdef Py_ssize_t n = bv.shape[0], i, j
    keep = np.zeros(n, dtype=bool)
    suppressed = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] sv = suppressed
    cdef unsigned char[::1] kv = keep.view(np.uint8)
    with nogil:
        for i in range(n):
            if sv[i]:
                continue
            kv[i] = 1
            for j in range(i + 1, n):
                if not sv[j] and _iou(bv, i, bv, j) > threshold:
                    sv[j] = 1
    return keep
