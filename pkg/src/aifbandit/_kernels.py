"""Compiled per-system loops for the logit-space Laplace fits.

Each system is small (``F x F``) and there are ``K * F`` of them per decision,
so the work is dominated by call overhead unless the loops are compiled.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _cholesky(a, out):
    """Lower Cholesky factor of ``a`` into ``out``; returns False if not positive definite."""
    n = a.shape[0]
    for j in range(n):
        acc = a[j, j]
        for k in range(j):
            acc -= out[j, k] * out[j, k]
        if not acc > 0.0:
            return False
        out[j, j] = np.sqrt(acc)
        for i in range(j + 1, n):
            acc = a[i, j]
            for k in range(j):
                acc -= out[i, k] * out[j, k]
            out[i, j] = acc / out[j, j]
        for i in range(j):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def _cho_solve(chol, b, out):
    n = b.size
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= chol[i, k] * out[k]
        out[i] = acc / chol[i, i]
    for i in range(n - 1, -1, -1):
        acc = out[i]
        for k in range(i + 1, n):
            acc -= chol[k, i] * out[k]
        out[i] = acc / chol[i, i]


@njit(cache=True)
def _lse(x):
    top = x.max()
    acc = 0.0
    for i in range(x.size):
        acc += np.exp(x[i] - top)
    return top + np.log(acc)


@njit(cache=True)
def _newton_system(s, p, out):
    """``out = S + S Lam S`` with ``Lam = diag(p) - p p^T``."""
    n = p.size
    sp = s @ p
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += s[i, k] * p[k] * s[k, j]
            out[i, j] = s[i, j] + acc - sp[i] * sp[j]


@njit(cache=True)
def fit_systems(m, s, outcome, zabs, max_iter, grad_tol, max_halvings,
                boost_start, boost_factor, max_boosts, decrement_tol):
    """Damped Newton in logit coordinates for every row; see ``solve_logit_laplace``.

    Returns ``v, p, log_evidence, kl, converged, iterations, status`` where a
    non-zero ``status`` marks a row whose final factorization failed.
    """
    b, f = m.shape
    v_out = np.zeros((b, f))
    p_out = np.zeros((b, f))
    le_out = np.zeros(b)
    kl_out = np.zeros(b)
    conv_out = np.zeros(b, dtype=np.bool_)
    it_out = np.zeros(b, dtype=np.int64)
    status = np.zeros(b, dtype=np.int64)

    sysm = np.empty((f, f))
    chol = np.empty((f, f))
    chol_s = np.empty((f, f))
    eye = np.eye(f)
    delta = np.empty(f)
    col = np.empty(f)
    for row in range(b):
        mr = m[row]
        sr = s[row]
        o = outcome[row]
        v = np.zeros(f)
        eta = mr.copy()
        quad = 0.0
        converged = False
        iters = 0
        for _ in range(max_iter):
            lse = _lse(eta)
            p = np.exp(eta - lse)
            resid = -p - v
            resid[o] += 1.0
            if np.max(np.abs(resid)) * zabs[row] < grad_tol:
                converged = True
                break
            _newton_system(sr, p, sysm)
            rhs = sr @ resid
            lam = 0.0
            ok = _cholesky(sysm, chol)
            tries = 0
            while not ok and tries < max_boosts:
                lam = boost_start if tries == 0 else lam * boost_factor
                ok = _cholesky(sysm + lam * eye, chol)
                tries += 1
            if not ok:
                break
            _cho_solve(chol, rhs, delta)
            w = sr @ delta
            sv = eta - mr
            dsv = delta @ sv
            dsd = delta @ w
            decrement = rhs @ delta
            f0 = -0.5 * quad + eta[o] - lse
            if decrement <= decrement_tol * max(1.0, abs(f0)):
                # too close for the line search to resolve; finish with a plain Newton step
                v += delta
                eta = mr + sr @ v
                quad = v @ (eta - mr)
                iters += 1
                converged = True
                break
            step = 1.0
            accepted = False
            for _h in range(max_halvings + 1):
                trial = eta + step * w
                f1 = -0.5 * (quad + 2.0 * step * dsv + step * step * dsd) + trial[o] - _lse(trial)
                if f1 > f0:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            v += step * delta
            eta = mr + sr @ v
            quad = v @ (eta - mr)
            iters += 1

        lse = _lse(eta)
        p = np.exp(eta - lse)
        _newton_system(sr, p, sysm)
        if not (_cholesky(sysm, chol) and _cholesky(sr, chol_s)):
            status[row] = 1
            converged = False
            v_out[row] = v
            p_out[row] = p
            le_out[row] = np.nan
            kl_out[row] = np.nan
            conv_out[row] = False
            it_out[row] = iters
            continue
        logdet_ratio = 0.0
        for i in range(f):
            logdet_ratio += 2.0 * (np.log(chol[i, i]) - np.log(chol_s[i, i]))
        # tr(M^-1 S) = ||L_M^-1 L_S||_F^2
        tr = 0.0
        for j in range(f):
            for i in range(f):
                acc = chol_s[i, j]
                for k in range(i):
                    acc -= chol[i, k] * col[k]
                col[i] = acc / chol[i, i]
                tr += col[i] * col[i]
        trace = f - tr
        v_out[row] = v
        p_out[row] = p
        le_out[row] = eta[o] - lse - 0.5 * quad - 0.5 * logdet_ratio
        kl_out[row] = max(0.5 * (quad + logdet_ratio - trace), 0.0)
        conv_out[row] = converged
        it_out[row] = iters
    return v_out, p_out, le_out, kl_out, conv_out, it_out, status
