"""Pure-numpy blockwise coordinate descent for the sparse group lasso.

This is the reference twin of the compiled kernel in ``_sgl_core.pyx``; both
expose the same :func:`solve` signature and run the same iteration:

* groups without a group penalty are updated one coordinate at a time by
  exact soft-thresholding;
* a penalized group is first screened (the block is zeroed when
  ``||S(c, l1)||_2 <= grp``, with ``c`` the block gradient at zero) and
  otherwise solved by restarted FISTA on its quadratic subproblem, using the
  precomputed block Gram matrix and step ``1 / L_g``;
* after each full sweep, sweeps restricted to the active groups are repeated
  until the relative objective change drops below ``tol``; a subsequent full
  sweep that also changes the objective by less than ``tol`` terminates.
"""
import numpy as np

BACKEND = "python"


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _rel_change(old, new):
    return abs(old - new) / max(abs(old), 1e-300)


def _objective(n, r, beta, ptr, l1, grp):
    val = 0.5 * float(r @ r) / n
    for g in range(len(ptr) - 1):
        b = beta[ptr[g]:ptr[g + 1]]
        val += l1[g] * np.abs(b).sum() + grp[g] * np.sqrt(b @ b)
    return val


def _block_value(gram, c, b, l1, grp):
    return 0.5 * b @ (gram @ b) - c @ b + l1 * np.abs(b).sum() + grp * np.sqrt(b @ b)


def _prox(v, l1, grp):
    v = _soft(v, l1)
    nrm = np.sqrt(v @ v)
    if nrm <= grp:
        return np.zeros_like(v)
    return v * (1.0 - grp / nrm)


def _coord_group(X, r, beta, start, stop, col_sq, l1, active_only):
    n = X.shape[0]
    for l in range(start, stop):
        old = beta[l]
        if col_sq[l] == 0.0:
            beta[l] = 0.0
            continue
        if active_only and old == 0.0:
            continue
        xl = X[:, l]
        rho = (xl @ r) / n + col_sq[l] * old
        new = _soft(rho, l1) / col_sq[l]
        if new != old:
            r += (old - new) * xl
            beta[l] = new


def _penalized_group(X, r, beta, start, stop, gram, lip, l1, grp, inner_max, inner_tol):
    n = X.shape[0]
    Xg = X[:, start:stop]
    b_old = beta[start:stop].copy()
    c = (Xg.T @ r) / n
    if np.any(b_old != 0.0):
        c = c + gram @ b_old

    screened = _soft(c, l1)
    if np.sqrt(screened @ screened) <= grp or lip <= 0.0:
        b = np.zeros_like(b_old)
    else:
        step = 1.0 / lip
        b = b_old.copy()
        v = b_old.copy()
        tk = 1.0
        for _ in range(inner_max):
            b_prev = b
            b = _prox(v - step * (gram @ v - c), step * l1, step * grp)
            diff = np.max(np.abs(b - b_prev))
            bmax = max(1.0, np.max(np.abs(b)))
            if diff <= inner_tol * bmax:
                break
            if (v - b) @ (b - b_prev) > 0.0:
                tk = 1.0
            tk1 = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
            mom = (tk - 1.0) / tk1
            tk = tk1
            v = b + mom * (b - b_prev)
        if _block_value(gram, c, b, l1, grp) > _block_value(gram, c, b_old, l1, grp):
            b = b_old

    delta = b_old - b
    if np.any(delta != 0.0):
        r += Xg @ delta
        beta[start:stop] = b


def _sweep(X, r, beta, ptr, l1, grp, col_sq, lip, grams, inner_max, inner_tol, active_only):
    for g in range(len(ptr) - 1):
        start, stop = ptr[g], ptr[g + 1]
        if grp[g] == 0.0:
            _coord_group(X, r, beta, start, stop, col_sq, l1[g], active_only)
        else:
            if active_only and not np.any(beta[start:stop] != 0.0):
                continue
            _penalized_group(X, r, beta, start, stop, grams[g], lip[g],
                             l1[g], grp[g], inner_max, inner_tol)


def solve(X, beta, resid, group_ptr, l1_pen, grp_pen, col_sq, lipschitz,
          gram_flat, gram_ptr, tol, max_iter, history, inner_max=2000, inner_tol=1e-13):
    """Run blockwise coordinate descent in place on ``beta`` and ``resid``.

    Returns ``(n_sweeps, converged)``; ``history[0]`` holds the starting
    objective and ``history[i]`` the objective after sweep ``i``.
    """
    n = X.shape[0]
    ptr = [int(v) for v in group_ptr]
    grams = []
    for g in range(len(ptr) - 1):
        s = ptr[g + 1] - ptr[g]
        a = int(gram_ptr[g])
        if grp_pen[g] != 0.0:
            # flat storage is column-major, the block is symmetric
            grams.append(np.asarray(gram_flat[a:a + s * s]).reshape(s, s))
        else:
            grams.append(None)

    obj = _objective(n, resid, beta, ptr, l1_pen, grp_pen)
    history[0] = obj
    it = 0
    converged = False
    while it < max_iter:
        _sweep(X, resid, beta, ptr, l1_pen, grp_pen, col_sq, lipschitz, grams,
               inner_max, inner_tol, False)
        it += 1
        new_obj = _objective(n, resid, beta, ptr, l1_pen, grp_pen)
        history[it] = new_obj
        if _rel_change(obj, new_obj) < tol:
            converged = True
            break
        obj = new_obj
        while it < max_iter:
            _sweep(X, resid, beta, ptr, l1_pen, grp_pen, col_sq, lipschitz, grams,
                   inner_max, inner_tol, True)
            it += 1
            new_obj = _objective(n, resid, beta, ptr, l1_pen, grp_pen)
            history[it] = new_obj
            done = _rel_change(obj, new_obj) < tol
            obj = new_obj
            if done:
                break
    return it, converged
