"""Per-group matching solvers: entropic OT, exact assignment, 1-d sorting, SNN.

All solvers return a GroupCoupling whose weights form a joint distribution
(total mass 1); row-normalize via data.row_conditional for conditionals.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .data import GroupCoupling, LabeledDataset, group_indices
from .propensity import cost_matrix, logit_transform
from .rand import substream

SUPPORT_THRESHOLD_SCALE = 1e-2   # support = weights > scale / (n1*n2)


def _coupling(weights: np.ndarray, p: np.ndarray, q: np.ndarray,
              group_label: int = 0,
              row_ids: np.ndarray | None = None,
              col_ids: np.ndarray | None = None,
              info: dict | None = None) -> GroupCoupling:
    n1, n2 = weights.shape
    return GroupCoupling(
        group_label=group_label,
        row_ids=np.arange(n1) if row_ids is None else row_ids,
        col_ids=np.arange(n2) if col_ids is None else col_ids,
        weights=weights,
        marginal_left=p,
        marginal_right=q,
        info=info or {},
    )


def uniform_marginals(n1: int, n2: int) -> tuple[np.ndarray, np.ndarray]:
    return np.full(n1, 1.0 / n1), np.full(n2, 1.0 / n2)


# ---------------------------------------------------------------------------
# entropic OT


def round_to_polytope(M: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Project a nonnegative matrix onto the transport polytope (exact
    marginals) by row/column damping plus a rank-one correction."""
    r = M.sum(axis=1)
    M1 = M * np.minimum(p / np.where(r > 0, r, 1.0), 1.0)[:, None]
    c = M1.sum(axis=0)
    M2 = M1 * np.minimum(q / np.where(c > 0, c, 1.0), 1.0)[None, :]
    er = p - M2.sum(axis=1)
    ec = q - M2.sum(axis=0)
    s = er.sum()
    if s > 1e-300:
        M2 = M2 + np.outer(er, ec) / s
    return M2


def entropic_objective(C: np.ndarray, M: np.ndarray, lam: float) -> float:
    """<C, M> - lam * H(M) with H(M) = -sum M log M."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(M > 0, M * np.log(M), 0.0))
    return float((C * M).sum() - lam * ent)


def sinkhorn(C: np.ndarray, marginals: tuple[np.ndarray, np.ndarray],
             lam: float = 0.05, tol: float = 1e-6, max_iter: int = 10000,
             objective_every: int = 10, group_label: int = 0,
             row_ids: np.ndarray | None = None,
             col_ids: np.ndarray | None = None) -> GroupCoupling:
    """Entropy-regularized OT by log-domain Sinkhorn iterations.

    Converged when both marginals' L1 deviation is <= tol. On non-convergence
    the best iterate seen is returned, flagged via info['converged'] with the
    achieved deviation. info['objective_trace'] records the entropic objective
    of the feasible (polytope-rounded) iterate every `objective_every` sweeps;
    that sequence is non-increasing. The raw iterates approach the optimum
    from below the feasible set, so their own objective is not monotone.
    """
    C = np.asarray(C, dtype=np.float64)
    p, q = (np.asarray(m, dtype=np.float64) for m in marginals)
    n1, n2 = C.shape
    if p.shape != (n1,) or q.shape != (n2,):
        raise ValueError("marginal shapes must match the cost matrix")
    if not np.all(np.isfinite(C)) or C.min() < 0:
        raise ValueError("cost matrix must be finite and nonnegative")
    if p.min() <= 0 or q.min() <= 0:
        raise ValueError("marginals must be strictly positive")
    if abs(p.sum() - 1) > 1e-9 or abs(q.sum() - 1) > 1e-9:
        raise ValueError("marginals must each sum to 1")
    if lam <= 0:
        raise ValueError("lambda must be positive")

    logp, logq = np.log(p), np.log(q)
    f = np.zeros(n1)
    g = np.zeros(n2)
    best = (np.inf, f, g)
    trace: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        f = lam * (logp - logsumexp((g[None, :] - C) / lam, axis=1))
        g = lam * (logq - logsumexp((f[:, None] - C) / lam, axis=0))
        M = np.exp((f[:, None] + g[None, :] - C) / lam)
        dev = max(np.abs(M.sum(axis=1) - p).sum(), np.abs(M.sum(axis=0) - q).sum())
        if dev < best[0]:
            best = (dev, f.copy(), g.copy())
        if objective_every and (it % objective_every == 0 or dev <= tol):
            trace.append(entropic_objective(C, round_to_polytope(M, p, q), lam))
        if dev <= tol:
            break
    dev, f, g = best
    M = np.exp((f[:, None] + g[None, :] - C) / lam)
    info = {
        "method": "sinkhorn",
        "lambda": lam,
        "iterations": it,
        "converged": bool(dev <= tol),
        "marginal_deviation": float(dev),
        "objective_trace": trace,
    }
    return _coupling(M, p, q, group_label, row_ids, col_ids, info)


# ---------------------------------------------------------------------------
# exact solvers


def exact_assignment(C: np.ndarray, group_label: int = 0,
                     row_ids: np.ndarray | None = None,
                     col_ids: np.ndarray | None = None) -> GroupCoupling:
    """Minimum-cost bipartite matching as a permutation coupling (mass 1/n per
    matched pair). Square inputs only; cubic-time LAP solver."""
    C = np.asarray(C, dtype=np.float64)
    n1, n2 = C.shape
    if n1 != n2:
        raise ValueError(f"exact assignment needs a square cost matrix, got {C.shape}")
    rows, cols = linear_sum_assignment(C)
    W = np.zeros_like(C)
    W[rows, cols] = 1.0 / n1
    p, q = uniform_marginals(n1, n2)
    info = {"method": "exact", "cost": float(C[rows, cols].sum() / n1)}
    return _coupling(W, p, q, group_label, row_ids, col_ids, info)


def sort_match_1d(s1: np.ndarray, s2: np.ndarray, group_label: int = 0,
                  row_ids: np.ndarray | None = None,
                  col_ids: np.ndarray | None = None) -> GroupCoupling:
    """Exact 1-d OT: pair the k-th smallest of s1 with the k-th smallest of
    s2. Ties broken by original index."""
    s1 = np.asarray(s1, dtype=np.float64).ravel()
    s2 = np.asarray(s2, dtype=np.float64).ravel()
    if s1.shape != s2.shape:
        raise ValueError("sequences must have equal length")
    n = len(s1)
    o1 = np.argsort(s1, kind="stable")
    o2 = np.argsort(s2, kind="stable")
    W = np.zeros((n, n))
    W[o1, o2] = 1.0 / n
    p, q = uniform_marginals(n, n)
    return _coupling(W, p, q, group_label, row_ids, col_ids, {"method": "sort1d"})


# ---------------------------------------------------------------------------
# shared nearest neighbours


def _knn_sets(queries: np.ndarray, pool: np.ndarray, k: int,
              self_indices: np.ndarray | None = None) -> np.ndarray:
    """(nq, k) indices of each query's k nearest pool points.

    Distance ties at the k-th neighbour are broken by lower pool index. When
    self_indices is given, query m is pool point self_indices[m] and counts as
    its own neighbour (distance exactly 0 by identity).
    """
    d = cost_matrix(queries, pool)
    if self_indices is not None:
        d[np.arange(len(queries)), self_indices] = -1.0   # self first, always
    order = np.lexsort((np.broadcast_to(np.arange(pool.shape[0]), d.shape), d), axis=1)
    return order[:, :k]


def snn_match(logits1: np.ndarray, logits2: np.ndarray, k: int,
              group_label: int = 0,
              row_ids: np.ndarray | None = None,
              col_ids: np.ndarray | None = None,
              return_unnormalized: bool = False):
    """Shared-nearest-neighbour similarity matching.

    For each cross-modality pair (i, j), four k-NN sets are formed: i's
    neighbours within modality 1 and within modality 2, and j's neighbours
    within modality 1 and within modality 2 (each point is its own neighbour
    within its home modality). With J = shared neighbours counted in each
    modality, similarity is J / (4k - J); every row and column has a nonzero
    entry because each point is its own neighbour. Rows of the returned
    coupling are scaled to total mass 1.
    """
    L1 = np.asarray(logits1, dtype=np.float64)
    L2 = np.asarray(logits2, dtype=np.float64)
    if L1.ndim == 1:
        L1 = L1[:, None]
    if L2.ndim == 1:
        L2 = L2[:, None]
    n1, n2 = L1.shape[0], L2.shape[0]
    if not 1 <= k <= min(n1, n2):
        raise ValueError(f"k must be in [1, {min(n1, n2)}], got {k}")

    nn11 = _knn_sets(L1, L1, k, self_indices=np.arange(n1))   # i's nbrs in modality 1
    nn12 = _knn_sets(L2, L1, k)                               # j's nbrs in modality 1
    nn21 = _knn_sets(L1, L2, k)                               # i's nbrs in modality 2
    nn22 = _knn_sets(L2, L2, k, self_indices=np.arange(n2))   # j's nbrs in modality 2

    def overlap(a: np.ndarray, b: np.ndarray, n_pool: int) -> np.ndarray:
        # |a_i ∩ b_j| for all (i, j) via membership indicator matrices
        A = np.zeros((a.shape[0], n_pool), dtype=np.int32)
        np.put_along_axis(A, a, 1, axis=1)
        B = np.zeros((b.shape[0], n_pool), dtype=np.int32)
        np.put_along_axis(B, b, 1, axis=1)
        return A @ B.T

    J = overlap(nn11, nn12, n1) + overlap(nn21, nn22, n2)
    M_tilde = J / (4.0 * k - J)
    if return_unnormalized:
        return M_tilde
    row_sums = M_tilde.sum(axis=1, keepdims=True)
    W = M_tilde / row_sums / n1          # row-stochastic, then joint mass 1
    p = np.full(n1, 1.0 / n1)
    info = {"method": "snn", "k": k}
    return _coupling(W, p, W.sum(axis=0), group_label, row_ids, col_ids, info)


# ---------------------------------------------------------------------------
# orchestration


def match_all_groups(ds1: LabeledDataset, ds2: LabeledDataset,
                     table1, table2, method: str = "ot",
                     lam: float = 0.05, k: int = 1, tol: float = 1e-6,
                     max_iter: int = 10000, normalize_cost: bool = False,
                     clamp: float = 1e-6) -> list[GroupCoupling]:
    """One coupling per shared label; scores -> logits -> cost -> solver."""
    L1 = logit_transform(table1, clamp)
    L2 = logit_transform(table2, clamp)
    out = []
    for t, rows1, rows2 in group_indices(ds1, ds2):
        a, b = L1[rows1], L2[rows2]
        if method == "snn":
            out.append(snn_match(a, b, k, group_label=t, row_ids=rows1, col_ids=rows2))
            continue
        C = cost_matrix(a, b)
        if normalize_cost and C.max() > 0:
            C = C / C.max()
        if method == "ot":
            out.append(sinkhorn(C, uniform_marginals(len(rows1), len(rows2)),
                                lam=lam, tol=tol, max_iter=max_iter,
                                group_label=t, row_ids=rows1, col_ids=rows2))
        elif method == "exact":
            out.append(exact_assignment(C, group_label=t, row_ids=rows1, col_ids=rows2))
        else:
            raise ValueError(f"unknown matching method {method!r}")
    return out


def uniform_couplings(ds1: LabeledDataset, ds2: LabeledDataset) -> list[GroupCoupling]:
    """Equal-weight matching within each label group (the random baseline)."""
    out = []
    for t, rows1, rows2 in group_indices(ds1, ds2):
        n1, n2 = len(rows1), len(rows2)
        p, q = uniform_marginals(n1, n2)
        out.append(_coupling(np.outer(p, q), p, q, t, rows1, rows2, {"method": "uniform"}))
    return out


def truth_couplings(ds1: LabeledDataset, ds2: LabeledDataset) -> list[GroupCoupling]:
    """Permutation couplings that place all mass on the true pairs."""
    if ds1.truth_index is None:
        raise ValueError("truth couplings need truth_index")
    out = []
    for t, rows1, rows2 in group_indices(ds1, ds2):
        pos2 = {int(r): b for b, r in enumerate(rows2)}
        n1, n2 = len(rows1), len(rows2)
        W = np.zeros((n1, n2))
        for a, r in enumerate(rows1):
            W[a, pos2[int(ds1.truth_index[r])]] = 1.0 / n1
        p, q = uniform_marginals(n1, n2)
        out.append(_coupling(W, p, q, t, rows1, rows2, {"method": "truth"}))
    return out


# ---------------------------------------------------------------------------
# optimality diagnostics


def coupling_support(coupling: GroupCoupling) -> np.ndarray:
    """(m, 2) local (row, col) indices of entries above the support threshold."""
    n1, n2 = coupling.shape
    thr = SUPPORT_THRESHOLD_SCALE / (n1 * n2)
    return np.argwhere(coupling.weights > thr)


def cyclic_monotonicity_check(coupling: GroupCoupling, C: np.ndarray,
                              cycles: int = 10000, max_len: int = 4,
                              seed: int = 0, tol: float = 1e-9) -> dict:
    """Sample cycles of support pairs and test the no-improving-cycle
    inequality sum c(i_m, j_m) <= sum c(i_m, j_{m+1}).

    Returns violation count, worst positive slack, and cycles sampled. An
    optimal plan's support passes every cycle; a perturbed one does not.
    """
    C = np.asarray(C, dtype=np.float64)
    support = coupling_support(coupling)
    if len(support) == 0:
        raise ValueError("coupling has empty support")
    rng = substream(seed, "cyclic-check")
    violations = 0
    worst = 0.0
    if len(support) == 1:
        return {"cycles": 0, "violations": 0, "worst_slack": 0.0, "support_size": 1}
    for _ in range(cycles):
        m = int(rng.integers(2, max_len + 1))
        m = min(m, len(support))
        pick = rng.choice(len(support), size=m, replace=False)
        pairs = support[pick]
        base = C[pairs[:, 0], pairs[:, 1]].sum()
        shifted = C[pairs[:, 0], np.roll(pairs[:, 1], -1)].sum()
        slack = base - shifted
        if slack > tol:
            violations += 1
            worst = max(worst, float(slack))
    return {"cycles": cycles, "violations": violations, "worst_slack": worst,
            "support_size": int(len(support))}
