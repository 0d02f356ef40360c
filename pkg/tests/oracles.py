"""Brute-force reference implementations used only by the tests."""

from collections import defaultdict

import numpy as np


def exposure_oracle(women, births, window):
    """Month-by-month enumeration of (cluster, year, age) months and births.

    ``women`` rows are (woman_id, cluster_id, dob, interview, weight);
    ``births`` rows are (woman_id, birth_cmc).
    """
    first, last = window
    ws = (first - 1900) * 12 + 1
    we = (last - 1900) * 12 + 12
    months = defaultdict(int)
    wmonths = defaultdict(float)
    nb = defaultdict(int)
    wnb = defaultdict(float)
    info = {}
    for wid, cid, dob, itw, w in women:
        info[wid] = (cid, dob, itw, w)
        for m in range(ws, we + 1):
            if m >= itw:
                break
            age = m - dob
            if 180 <= age < 600:
                key = (cid, 1900 + (m - 1) // 12, (age - 180) // 60)
                months[key] += 1
                wmonths[key] += w
    for wid, b in births:
        cid, dob, itw, w = info[wid]
        age = b - dob
        if ws <= b <= we and b < itw and 180 <= age < 600:
            key = (cid, 1900 + (b - 1) // 12, (age - 180) // 60)
            nb[key] += 1
            wnb[key] += w
    return months, wmonths, nb, wnb


def jackknife_oracle(rows, estimator):
    """Delete-one-cluster jackknife by explicit replicate recomputation.

    ``rows`` are (cluster_id, age_group, w_births, w_exposure).
    """
    clusters = sorted({r[0] for r in rows})

    def stat(keep):
        wb = np.zeros(7)
        we = np.zeros(7)
        for c, a, b, e in rows:
            if c in keep:
                wb[a] += b
                we[a] += e
        if estimator == "tfr":
            present = np.array([any(r[1] == a and r[3] > 0 for r in rows) for a in range(7)])
            if np.any(we[present] <= 0):
                return np.nan
            return 5 * np.sum(wb[present] / we[present])
        a = rows[0][1]
        return wb[a] / we[a] * 1000 if we[a] > 0 else np.nan

    reps = np.array([stat(set(clusters) - {c}) for c in clusters])
    reps = reps[np.isfinite(reps)]
    c = len(reps)
    return (c - 1) / c * np.sum((reps - reps.mean()) ** 2)


def fh_grid_oracle(y, v, sigma_prior, alpha_var=1000.0, grid=None):
    """Posterior mean of ``eta_i = alpha + u_i`` for a two-level Gaussian model.

    ``y_i ~ N(eta_i, v_i)``, ``u_i ~ N(0, sigma^2)``, ``alpha ~ N(0, alpha_var)``.
    Latents are integrated in closed form; ``log sigma`` by a dense grid.
    """
    y = np.asarray(y, float)
    v = np.asarray(v, float)
    n = y.size
    a = np.hstack([np.ones((n, 1)), np.eye(n)])
    grid = np.linspace(-9.0, 4.0, 20001) if grid is None else grid
    logw = np.empty(grid.size)
    means = np.empty((grid.size, n))
    for k, t in enumerate(grid):
        s2 = np.exp(2 * t)
        d = np.diag(np.r_[alpha_var, np.full(n, s2)])
        cov_y = a @ d @ a.T + np.diag(v)
        _, logdet = np.linalg.slogdet(cov_y)
        logw[k] = -0.5 * (logdet + y @ np.linalg.solve(cov_y, y)) + float(sigma_prior.logpdf_internal(t))
        prec = np.linalg.inv(d) + a.T @ (a / v[:, None])
        z = np.linalg.solve(prec, a.T @ (y / v))
        means[k] = a @ z
    w = np.exp(logw - logw.max())
    w /= w.sum()
    return w @ means, float(w @ np.exp(grid))
