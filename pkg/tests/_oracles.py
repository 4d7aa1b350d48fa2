"""Plain-Python / numpy reference implementations used as test oracles."""

import math

import numpy as np
import torch


def _unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def nt_xent_bruteforce(za, zb, tau):
    views = [_unit(list(r)) for r in za] + [_unit(list(r)) for r in zb]
    n = len(za)
    total = 0.0
    for i in range(2 * n):
        pos = i + n if i < n else i - n
        sims = {j: sum(a * b for a, b in zip(views[i], views[j])) / tau for j in range(2 * n) if j != i}
        denom = sum(math.exp(s) for s in sims.values())
        total += -math.log(math.exp(sims[pos]) / denom)
    return total / (2 * n)


def barlow_oracle(za, zb, lambd, eps=1e-5):
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    n, d = za.shape

    def std(z):
        out = np.empty_like(z)
        for j in range(d):
            col = z[:, j]
            mu = sum(col) / n
            sd = math.sqrt(sum((x - mu) ** 2 for x in col) / n)
            out[:, j] = (col - mu) / (sd + eps)
        return out

    a, b = std(za), std(zb)
    loss = 0.0
    for i in range(d):
        for j in range(d):
            c = sum(a[k, i] * b[k, j] for k in range(n)) / n
            loss += (1.0 - c) ** 2 if i == j else lambd * c * c
    return loss


def sinkhorn_oracle(scores, eps, iters):
    s = np.asarray(scores, dtype=np.float64)
    n, k = s.shape
    # unshifted exponentials; the first step spreads each row's mass to 1/N
    q = np.exp(s / eps)
    q = q / q.sum(axis=1, keepdims=True) / n
    for _ in range(iters):
        q = q / q.sum(axis=0, keepdims=True) / k
        q = q / q.sum(axis=1, keepdims=True) / n
    return q


def swav_oracle(za, zb, protos, tau, eps, iters):
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    p = np.asarray(protos, dtype=np.float64)
    za = za / np.linalg.norm(za, axis=1, keepdims=True)
    zb = zb / np.linalg.norm(zb, axis=1, keepdims=True)
    n = za.shape[0]
    qa = sinkhorn_oracle(za @ p.T, eps, iters) * n
    qb = sinkhorn_oracle(zb @ p.T, eps, iters) * n

    def log_softmax(x):
        m = x.max(axis=1, keepdims=True)
        return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))

    ce_a = -(qa * log_softmax(zb @ p.T / tau)).sum(axis=1).mean()
    ce_b = -(qb * log_softmax(za @ p.T / tau)).sum(axis=1).mean()
    return 0.5 * (ce_a + ce_b)


def finite_difference_check(fn, inputs, h=1e-4):
    """Max relative error between autograd and central differences over all inputs.

    ``fn`` maps a list of float64 tensors to a scalar tensor. Relative error is
    ``||g_auto - g_fd|| / max(||g_fd||, 1e-8)`` per input tensor.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(inputs), inputs)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(inputs, grads):
            fd = torch.zeros_like(t)
            flat, fd_flat = t.view(-1), fd.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(fn(inputs))
                flat[i] = orig - h
                down = float(fn(inputs))
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * h)
            err = float((g - fd).norm() / max(float(fd.norm()), 1e-8))
            worst = max(worst, err)
    return worst
