# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled blockwise coordinate descent for the sparse group lasso.

Mirrors :mod:`ggreg._sgl_py` step for step; see that module for the
algorithm description.
"""
import numpy as np

from libc.math cimport fabs, sqrt
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport ddot, daxpy, dgemv

BACKEND = "cython"


cdef inline double _soft(double x, double t) noexcept nogil:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


cdef inline double _rel_change(double old, double new) noexcept nogil:
    cdef double scale = fabs(old)
    if scale < 1e-300:
        scale = 1e-300
    return fabs(old - new) / scale


cdef double _objective(int n, int n_groups, double* r, double* beta,
                       long* ptr, double* l1, double* grp) noexcept nogil:
    cdef int one = 1
    cdef double val = 0.5 * ddot(&n, r, &one, r, &one) / n
    cdef int g
    cdef long l
    cdef double a, s2, b
    for g in range(n_groups):
        a = 0.0
        s2 = 0.0
        for l in range(ptr[g], ptr[g + 1]):
            b = beta[l]
            a += fabs(b)
            s2 += b * b
        val += l1[g] * a + grp[g] * sqrt(s2)
    return val


cdef double _block_value(int s, double* gram, double* c, double* b,
                         double l1, double grp, double* tmp) noexcept nogil:
    # 0.5 b'Gb - c'b + l1 |b|_1 + grp |b|_2
    cdef int one = 1
    cdef double done = 1.0, dzero = 0.0
    cdef char trans = b'N'
    dgemv(&trans, &s, &s, &done, gram, &s, b, &one, &dzero, tmp, &one)
    cdef double quad = 0.5 * ddot(&s, b, &one, tmp, &one)
    cdef double lin = ddot(&s, c, &one, b, &one)
    cdef double a = 0.0, s2 = 0.0
    cdef int i
    for i in range(s):
        a += fabs(b[i])
        s2 += b[i] * b[i]
    return quad - lin + l1 * a + grp * sqrt(s2)


cdef void _prox(int s, double* v, double l1, double grp) noexcept nogil:
    cdef int i
    cdef double s2 = 0.0, nrm, scale
    for i in range(s):
        v[i] = _soft(v[i], l1)
        s2 += v[i] * v[i]
    nrm = sqrt(s2)
    if nrm <= grp:
        for i in range(s):
            v[i] = 0.0
    else:
        scale = 1.0 - grp / nrm
        for i in range(s):
            v[i] *= scale


cdef int _coord_group(int n, double* X, double* r, double* beta, long start, long stop,
                      double* col_sq, double l1, bint active_only) noexcept nogil:
    cdef int one = 1
    cdef long l
    cdef double old, rho, new, delta
    cdef int changed = 0
    for l in range(start, stop):
        old = beta[l]
        if col_sq[l] == 0.0:
            beta[l] = 0.0
            continue
        if active_only and old == 0.0:
            continue
        rho = ddot(&n, &X[l * n], &one, r, &one) / n + col_sq[l] * old
        new = _soft(rho, l1) / col_sq[l]
        if new != old:
            delta = old - new
            daxpy(&n, &delta, &X[l * n], &one, r, &one)
            beta[l] = new
            changed = 1
    return changed


cdef int _penalized_group(int n, double* X, double* r, double* beta, long start, int s,
                          double* gram, double lip, double l1, double grp,
                          int inner_max, double inner_tol, double* work) noexcept nogil:
    cdef int one = 1, i, it
    cdef double done = 1.0, dzero = 0.0, dminus = -1.0
    cdef double inv_n = 1.0 / n
    cdef char trans_t = b'T', trans_n = b'N'
    cdef double* c = work
    cdef double* b_old = work + s
    cdef double* b = work + 2 * s
    cdef double* b_prev = work + 3 * s
    cdef double* v = work + 4 * s
    cdef double* tmp = work + 5 * s
    cdef double nrm2, step, tk, tk1, mom, diff, bmax, f_new, f_old, restart
    cdef bint nonzero_start = 0

    for i in range(s):
        b_old[i] = beta[start + i]
        if b_old[i] != 0.0:
            nonzero_start = 1
    # c = X_g' r / n + G b_old  (gradient of the block problem at zero)
    dgemv(&trans_t, &n, &s, &inv_n, &X[start * n], &n, r, &one, &dzero, c, &one)
    if nonzero_start:
        dgemv(&trans_n, &s, &s, &done, gram, &s, b_old, &one, &done, c, &one)

    nrm2 = 0.0
    for i in range(s):
        diff = _soft(c[i], l1)
        nrm2 += diff * diff
    if sqrt(nrm2) <= grp or lip <= 0.0:
        for i in range(s):
            b[i] = 0.0
    else:
        step = 1.0 / lip
        for i in range(s):
            b[i] = b_old[i]
            b_prev[i] = b_old[i]
            v[i] = b_old[i]
        tk = 1.0
        for it in range(inner_max):
            # v <- v - step * (G v - c)
            dgemv(&trans_n, &s, &s, &done, gram, &s, v, &one, &dzero, tmp, &one)
            for i in range(s):
                b_prev[i] = b[i]
                b[i] = v[i] - step * (tmp[i] - c[i])
            _prox(s, b, step * l1, step * grp)
            diff = 0.0
            bmax = 1.0
            restart = 0.0
            for i in range(s):
                if fabs(b[i] - b_prev[i]) > diff:
                    diff = fabs(b[i] - b_prev[i])
                if fabs(b[i]) > bmax:
                    bmax = fabs(b[i])
                restart += (v[i] - b[i]) * (b[i] - b_prev[i])
            if diff <= inner_tol * bmax:
                break
            if restart > 0.0:
                tk = 1.0
            tk1 = 0.5 * (1.0 + sqrt(1.0 + 4.0 * tk * tk))
            mom = (tk - 1.0) / tk1
            tk = tk1
            for i in range(s):
                v[i] = b[i] + mom * (b[i] - b_prev[i])
        f_new = _block_value(s, gram, c, b, l1, grp, tmp)
        f_old = _block_value(s, gram, c, b_old, l1, grp, tmp)
        if f_new > f_old:
            for i in range(s):
                b[i] = b_old[i]

    cdef int changed = 0
    for i in range(s):
        tmp[i] = b_old[i] - b[i]
        if tmp[i] != 0.0:
            changed = 1
    if changed:
        # r <- r + X_g (b_old - b)
        dgemv(&trans_n, &n, &s, &done, &X[start * n], &n, tmp, &one, &done, r, &one)
        for i in range(s):
            beta[start + i] = b[i]
    return changed


cdef inline bint _group_active(double* beta, long start, long stop) noexcept nogil:
    cdef long l
    for l in range(start, stop):
        if beta[l] != 0.0:
            return 1
    return 0


def solve(double[::1, :] X, double[::1] beta, double[::1] resid,
          long[::1] group_ptr, double[::1] l1_pen, double[::1] grp_pen,
          double[::1] col_sq, double[::1] lipschitz, double[::1] gram_flat,
          long[::1] gram_ptr, double tol, int max_iter, double[::1] history,
          int inner_max=2000, double inner_tol=1e-13):
    """Run blockwise coordinate descent in place on ``beta`` and ``resid``.

    Returns ``(n_sweeps, converged)``; ``history[0]`` holds the starting
    objective and ``history[i]`` the objective after sweep ``i``.
    """
    cdef int n = X.shape[0]
    cdef int n_groups = group_ptr.shape[0] - 1
    cdef int max_size = 0, g, s
    cdef int it = 0
    cdef bint converged = 0, full_done
    cdef double obj, new_obj
    cdef double* work
    cdef double* Xp = &X[0, 0]
    cdef double* bp = &beta[0]
    cdef double* rp = &resid[0]
    cdef long* ptr = &group_ptr[0]
    cdef double* l1 = &l1_pen[0]
    cdef double* grp = &grp_pen[0]
    cdef double* cs = &col_sq[0]
    cdef double* lip = &lipschitz[0]
    cdef double* gf = &gram_flat[0] if gram_flat.shape[0] > 0 else NULL
    cdef long* gp = &gram_ptr[0]
    cdef double* hist = &history[0]

    for g in range(n_groups):
        s = ptr[g + 1] - ptr[g]
        if s > max_size:
            max_size = s
    work = <double*> malloc(6 * (max_size + 1) * sizeof(double))
    if work == NULL:
        raise MemoryError()
    try:
        with nogil:
            obj = _objective(n, n_groups, rp, bp, ptr, l1, grp)
            hist[0] = obj
            while it < max_iter:
                _sweep(n, n_groups, Xp, rp, bp, ptr, l1, grp, cs, lip, gf, gp,
                       inner_max, inner_tol, work, 0)
                it += 1
                new_obj = _objective(n, n_groups, rp, bp, ptr, l1, grp)
                hist[it] = new_obj
                if _rel_change(obj, new_obj) < tol:
                    converged = 1
                    break
                obj = new_obj
                while it < max_iter:
                    _sweep(n, n_groups, Xp, rp, bp, ptr, l1, grp, cs, lip, gf, gp,
                           inner_max, inner_tol, work, 1)
                    it += 1
                    new_obj = _objective(n, n_groups, rp, bp, ptr, l1, grp)
                    hist[it] = new_obj
                    full_done = _rel_change(obj, new_obj) < tol
                    obj = new_obj
                    if full_done:
                        break
    finally:
        free(work)
    return it, bool(converged)


cdef void _sweep(int n, int n_groups, double* X, double* r, double* beta, long* ptr,
                 double* l1, double* grp, double* col_sq, double* lip, double* gram,
                 long* gram_ptr, int inner_max, double inner_tol, double* work,
                 bint active_only) noexcept nogil:
    cdef int g, s
    for g in range(n_groups):
        if grp[g] == 0.0:
            _coord_group(n, X, r, beta, ptr[g], ptr[g + 1], col_sq, l1[g], active_only)
        else:
            if active_only and not _group_active(beta, ptr[g], ptr[g + 1]):
                continue
            s = ptr[g + 1] - ptr[g]
            _penalized_group(n, X, r, beta, ptr[g], s, &gram[gram_ptr[g]], lip[g],
                             l1[g], grp[g], inner_max, inner_tol, work)
