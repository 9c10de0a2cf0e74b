"""Independent reference computations used by the test-suite.

Nothing here imports the code paths it is used to check.
"""

from __future__ import annotations

import numpy as np
import torch

FD_STEP = 1e-6
# below this magnitude the comparison is absolute
GRAD_FLOOR = 1e-5
# the floor also covers float64 round-off of the difference, ~eps*|loss|/step
ROUNDOFF_MARGIN = 1e4
# one-sided slopes disagreeing by more than this mark a LeakyReLU/max-pool
# switch inside the stencil. A wrong analytic gradient cannot hide here: the
# two one-sided slopes agree with each other and disagree with autograd.
KINK_TOL = 1e-3


def central_difference_check(loss_fn, named_params, n_samples, rng, step=FD_STEP):
    """Compare autograd with central differences on ``n_samples`` random entries.

    ``loss_fn`` must be a deterministic closure returning a float64 scalar.
    Entries whose stencil straddles a kink are replaced by fresh draws.
    Returns a list of ``(name, index, analytic, numeric, rel_error)``.
    """
    named_params = [(n, p) for n, p in named_params]
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    base = loss.item()
    floor = max(GRAD_FLOOR, ROUNDOFF_MARGIN * np.finfo(np.float64).eps * abs(base) / step)
    grads = torch.autograd.grad(loss, [p for _, p in named_params], allow_unused=True)
    sizes = np.array([p.numel() for _, p in named_params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(sizes.sum())
    results = []
    with torch.no_grad():
        for flat in order:
            if len(results) == n_samples:
                break
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = named_params[k]
            idx = int(flat - offsets[k])
            view = p.view(-1)
            orig = view[idx].item()
            view[idx] = orig + step
            f_plus = loss_fn().item()
            view[idx] = orig - step
            f_minus = loss_fn().item()
            view[idx] = orig
            right, left = (f_plus - base) / step, (base - f_minus) / step
            if abs(right - left) > KINK_TOL * max(abs(right), abs(left), floor):
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            g = grads[k]
            analytic = 0.0 if g is None else g.reshape(-1)[idx].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            results.append((name, idx, analytic, numeric, rel))
    return results


def kl_monte_carlo(mean, log_var, n, rng):
    """E_q[log q(z) - log p(z)] by sampling q = N(mean, exp(log_var)), p = N(0, I)."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.exp(0.5 * np.asarray(log_var, dtype=np.float64))
    eps = rng.standard_normal((n, mean.size))
    z = mean + eps * std
    log_q = -0.5 * (eps**2 + np.log(2 * np.pi) + 2 * np.log(std)).sum(1)
    log_p = -0.5 * (z**2 + np.log(2 * np.pi)).sum(1)
    return float(np.mean(log_q - log_p))


def rank1_bruteforce(scores, probe_ids, gallery_ids):
    hits = 0
    for i, row in enumerate(scores):
        best_j, best = 0, row[0]
        for j in range(1, len(row)):
            if row[j] > best:
                best_j, best = j, row[j]
        hits += gallery_ids[best_j] == probe_ids[i]
    return hits / len(scores)


def vr_bruteforce(genuine, impostor, far):
    """Walk the impostor scores from the top in plain python, one tie group at a time."""
    imp = sorted((float(v) for v in impostor), reverse=True)
    n = len(imp)
    best = None
    i = 0
    while i < n:
        j = i
        while j < n and imp[j] == imp[i]:
            j += 1
        # j impostors score >= imp[i]; lower thresholds only admit more
        if j / n > far:
            break
        best = imp[i]
        i = j
    if best is None:
        best = float(np.nextafter(imp[0], np.inf))
    return sum(1 for g in genuine if float(g) >= best) / len(genuine)


def softmax_columns(logits):
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)
