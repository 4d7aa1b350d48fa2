"""SimCLR, Barlow Twins and SwAV objectives."""

from __future__ import annotations

import torch
import torch.nn.functional as F


def nt_xent_loss(z_a: torch.Tensor, z_b: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """Normalized-temperature cross-entropy over the 2N views of a batch.

    Row ``i`` of ``z_a`` and row ``i`` of ``z_b`` are positives; every other
    view in the batch is a negative. Self-similarity is masked out of the
    denominator. Returns the mean over all 2N anchors.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = z_a.shape[0]
    z = F.normalize(torch.cat([z_a, z_b], dim=0), dim=1)
    sim = z @ z.T / temperature
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return F.cross_entropy(sim, targets)


def standardize_columns(z: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Centre each feature over the batch and divide by (population sd + eps)."""
    z = z - z.mean(dim=0, keepdim=True)
    return z / (z.pow(2).mean(dim=0, keepdim=True).sqrt() + eps)


def cross_correlation(z_a: torch.Tensor, z_b: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    n = z_a.shape[0]
    return standardize_columns(z_a, eps).T @ standardize_columns(z_b, eps) / n


def barlow_twins_loss(z_a: torch.Tensor, z_b: torch.Tensor, lambd: float = 5e-3, eps: float = 1e-5) -> torch.Tensor:
    """Invariance term on the diagonal of C plus ``lambd`` times the squared off-diagonal."""
    if z_a.shape[0] < 2:
        raise ValueError("barlow_twins_loss needs a batch of at least 2")
    c = cross_correlation(z_a, z_b, eps)
    diag = torch.diagonal(c)
    on_diag = (1.0 - diag).pow(2).sum()
    off_diag = c.pow(2).sum() - diag.pow(2).sum()
    return on_diag + lambd * off_diag


@torch.no_grad()
def sinkhorn_normalize(scores: torch.Tensor, epsilon: float = 0.05, iters: int = 3) -> torch.Tensor:
    """Equipartition assignment with column sums 1/K and row sums 1/N.

    Rows are shifted by their max before exponentiating; the first row
    normalization absorbs that shift exactly. Each iteration normalizes the
    columns then the rows, so the output always has rows summing to 1/N.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n, k = scores.shape
    logits = scores / epsilon
    q = torch.exp(logits - logits.max(dim=1, keepdim=True).values)
    q = q / q.sum(dim=1, keepdim=True) / n
    for _ in range(iters):
        q = q / q.sum(dim=0, keepdim=True) / k
        q = q / q.sum(dim=1, keepdim=True) / n
    return q


def swapped_prediction_loss(
    z_a: torch.Tensor,
    z_b: torch.Tensor,
    prototypes: torch.Tensor,
    codes_a: torch.Tensor,
    codes_b: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """SwAV cross-entropy with fixed codes (each row of ``codes_*`` sums to 1)."""
    p_a = F.normalize(z_a, dim=1) @ prototypes.T / temperature
    p_b = F.normalize(z_b, dim=1) @ prototypes.T / temperature
    ce_a = -(codes_a * F.log_softmax(p_b, dim=1)).sum(dim=1).mean()
    ce_b = -(codes_b * F.log_softmax(p_a, dim=1)).sum(dim=1).mean()
    return 0.5 * (ce_a + ce_b)


def swav_codes(z: torch.Tensor, prototypes: torch.Tensor, epsilon: float, iters: int) -> torch.Tensor:
    """Sinkhorn codes rescaled so that each sample's code is a distribution."""
    scores = F.normalize(z.detach(), dim=1) @ prototypes.detach().T
    return sinkhorn_normalize(scores, epsilon, iters) * z.shape[0]


def swav_loss(
    z_a: torch.Tensor,
    z_b: torch.Tensor,
    prototypes: torch.Tensor,
    temperature: float = 0.1,
    epsilon: float = 0.05,
    sinkhorn_iters: int = 3,
) -> torch.Tensor:
    if prototypes.shape[0] < 2:
        raise ValueError("swav_loss needs at least 2 prototypes")
    if z_a.shape[0] < 2:
        raise ValueError("swav_loss needs a batch of at least 2")
    q_a = swav_codes(z_a, prototypes, epsilon, sinkhorn_iters)
    q_b = swav_codes(z_b, prototypes, epsilon, sinkhorn_iters)
    return swapped_prediction_loss(z_a, z_b, prototypes, q_a, q_b, temperature)
