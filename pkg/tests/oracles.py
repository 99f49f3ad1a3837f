"""Independent oracles used to freeze expected values.

Each oracle computes its quantity by a route different from the library
implementation it checks: Monte-Carlo density ratios for the closed-form
KL, exact enumeration for the JS surrogate, central finite differences for
gradients, and direct joint-count summation for discrete MI.
"""

import math

import numpy as np
import torch


def mc_kl_estimate(mean, log_var, n_samples, rng):
    """Monte-Carlo KL[N(mean, diag var) || N(0, I)] via explicit log-densities.

    Returns (estimate, standard error).
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    std = np.exp(0.5 * log_var)
    eps = rng.standard_normal((n_samples, mean.size))
    z = mean + std * eps
    log_q = -0.5 * np.sum((z - mean) ** 2 / np.exp(log_var) + log_var + math.log(2 * math.pi), axis=1)
    log_p = -0.5 * np.sum(z**2 + math.log(2 * math.pi), axis=1)
    ratio = log_q - log_p
    return float(ratio.mean()), float(ratio.std(ddof=1) / math.sqrt(n_samples))


def js_divergence(p, q):
    """Jensen-Shannon divergence of two discrete distributions, by summation."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def mutual_information_by_summation(joint_counts):
    """Plug-in MI in nats from a 2-D contingency table, by explicit loops."""
    joint = np.asarray(joint_counts, dtype=np.float64)
    n = joint.sum()
    mi = 0.0
    for i in range(joint.shape[0]):
        for j in range(joint.shape[1]):
            pij = joint[i, j] / n
            if pij == 0:
                continue
            pi = joint[i, :].sum() / n
            pj = joint[:, j].sum() / n
            mi += pij * math.log(pij / (pi * pj))
    return mi


def entropy_by_summation(counts):
    counts = np.asarray(counts, dtype=np.float64)
    p = counts / counts.sum()
    return float(-np.sum(p[p > 0] * np.log(p[p > 0])))


def finite_difference_gradients(f, params, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each tensor in ``params``.

    Mutates parameters in place (restoring them), so ``f`` must read the live
    parameter values. Use float64 parameters.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            g_flat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = f()
                flat[i] = orig - h
                f_minus = f()
                flat[i] = orig
                g_flat[i] = (f_plus - f_minus) / (2.0 * h)
            grads.append(g)
    return grads


def max_relative_gradient_error(analytic, numeric, floor=1e-6):
    """Worst per-coordinate relative disagreement between two gradient lists.

    Coordinates whose gradient magnitude is below ``floor`` are compared
    against the floor instead: central differences at h=1e-5 in float64
    carry ~1e-11 absolute noise, so gradients that small cannot be verified
    to a relative tolerance by any implementation.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst
