"""Mean-field CRF refinement of control-point label probabilities.

The energy couples per-control unary costs -log Q with pairwise penalties
w * mu(l_i, l_j) * K(pos_i(l_i), pos_j(l_j)) over one-ring-adjacent control
points, where K is a Gaussian kernel on great-circle distance between the
candidate label positions.  Refinement unrolls T mean-field updates
(CRF-as-RNN style): messages are accumulated from current beliefs, added to
the anchored unary logits, and re-normalized by a row softmax.  The
compatibility matrix mu is learnable; sigma and w are configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ag
from .discrete_reg import ControlGrid, DeformationProbabilities

UNARY_FLOOR = 1e-12


@dataclass
class CrfParams:
    iterations: int
    mu: object          # (N_l, N_l) array or autodiff tensor
    sigma: float
    weight: float

    def __post_init__(self):
        if not 0 <= self.iterations <= 20:
            raise ValueError(
                f"iterations must lie in [0, 20], got {self.iterations}")
        if self.sigma <= 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.sigma}")
        if self.weight < 0:
            raise ValueError(f"pairwise weight must be nonnegative, got {self.weight}")
        mu = ag.value_of(self.mu)
        if mu.ndim != 2 or mu.shape[0] != mu.shape[1]:
            raise ValueError(f"mu must be square, got shape {mu.shape}")


def mean_edge_arc(grid: ControlGrid) -> float:
    """Mean great-circle length of the control-mesh edges."""
    a = grid.control_positions[grid.edges[:, 0]]
    b = grid.control_positions[grid.edges[:, 1]]
    return float(np.mean(np.arccos(np.clip(np.sum(a * b, axis=1), -1.0, 1.0))))


def init_crf_params(grid: ControlGrid, iterations: int = 5,
                    sigma: float | None = None, weight: float = 1.0) -> CrfParams:
    """mu starts at 1 - I (equal labels cost nothing); sigma defaults to the
    mean control edge arc so the kernel spans neighboring label sets."""
    n_l = grid.n_labels
    mu = np.ones((n_l, n_l)) - np.eye(n_l)
    if sigma is None:
        sigma = mean_edge_arc(grid)
    return CrfParams(iterations=iterations, mu=mu, sigma=sigma, weight=weight)


def _kernel_stack(grid: ControlGrid, sigma: float) -> np.ndarray:
    """K[e, l, l'] = exp(-arc(pos_dst(l), pos_src(l'))^2 / (2 sigma^2))."""
    pos_dst = grid.label_positions[grid.edges[:, 0]]    # (E, N_l, 3)
    pos_src = grid.label_positions[grid.edges[:, 1]]
    cos = np.einsum("elx,emx->elm", pos_dst, pos_src)
    arc = np.arccos(np.clip(cos, -1.0, 1.0))
    return np.exp(-(arc ** 2) / (2.0 * sigma * sigma))


def _check_shapes(Q: DeformationProbabilities, grid: ControlGrid,
                  params: CrfParams) -> None:
    q = Q.value
    if q.shape != (grid.n_controls, grid.n_labels):
        raise ValueError(
            f"Q shape {q.shape} does not match grid "
            f"({grid.n_controls}, {grid.n_labels})")
    if ag.value_of(params.mu).shape != (grid.n_labels, grid.n_labels):
        raise ValueError(
            f"mu shape {ag.value_of(params.mu).shape} does not match "
            f"N_l = {grid.n_labels}")


def crf_energy(assignment, Q: DeformationProbabilities, grid: ControlGrid,
               params: CrfParams) -> float:
    """Energy of one hard assignment: unary -log Q plus pairwise penalties
    over directed adjacent pairs."""
    _check_shapes(Q, grid, params)
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (grid.n_controls,):
        raise ValueError(
            f"assignment must have shape ({grid.n_controls},), "
            f"got {assignment.shape}")
    if assignment.min() < 0 or assignment.max() >= grid.n_labels:
        raise ValueError("assignment label out of range")
    q = Q.value
    mu = ag.value_of(params.mu)
    unary = -np.log(q[np.arange(grid.n_controls), assignment] + UNARY_FLOOR).sum()
    if len(grid.edges) == 0:
        return float(unary)
    dst, src = grid.edges[:, 0], grid.edges[:, 1]
    l_dst, l_src = assignment[dst], assignment[src]
    p_dst = grid.label_positions[dst, l_dst]
    p_src = grid.label_positions[src, l_src]
    arc = np.arccos(np.clip(np.sum(p_dst * p_src, axis=1), -1.0, 1.0))
    kernel = np.exp(-(arc ** 2) / (2.0 * params.sigma ** 2))
    pairwise = params.weight * np.sum(mu[l_dst, l_src] * kernel)
    return float(unary + pairwise)


def crf_refine(Q: DeformationProbabilities, grid: ControlGrid,
               params: CrfParams) -> DeformationProbabilities:
    """T mean-field iterations (tensor-aware in Q and mu).

    Each step: m_i(l) = sum_{j in N(i)} sum_{l'} K[i,l; j,l'] mu[l,l'] Q_j(l'),
    then Q <- row-softmax(log(Q_init + eps) - w m).  T = 0 or w = 0 leave Q
    untouched (for w = 0 the message term vanishes identically, so skipping
    the renormalization is exact rather than 1e-12 close).
    """
    _check_shapes(Q, grid, params)
    if params.iterations == 0 or params.weight == 0 or len(grid.edges) == 0:
        return Q
    kernel = _kernel_stack(grid, params.sigma)
    coupled = ag.mul(kernel, params.mu)                 # (E, N_l, N_l)
    dst, src = grid.edges[:, 0], grid.edges[:, 1]
    anchor = ag.log(ag.add(Q.Q, UNARY_FLOOR))
    q = Q.Q
    for _ in range(params.iterations):
        per_edge = ag.einsum2("elm,em->el", coupled, ag.take_rows(q, src))
        message = ag.segment_sum(per_edge, dst, grid.n_controls)
        q = ag.softmax_rows(ag.sub(anchor, ag.mul(params.weight, message)))
    return DeformationProbabilities(q)
