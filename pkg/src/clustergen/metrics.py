"""Unsupervised clustering accuracy via optimal assignment.

ACC = max over one-to-one mappings m of (1/N) sum 1{l_i = m(c_i)}. The
maximizing mapping comes from the Hungarian algorithm applied to the
negated contingency matrix, padded square when K != L so partial
injections are representable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError


@dataclass
class ClusterEval:
    ground_truth: np.ndarray
    predicted: np.ndarray
    contingency: np.ndarray  # L x K counts
    mapping: np.ndarray      # length K: cluster -> label, -1 if unmapped
    acc: float

    @property
    def n(self) -> int:
        return len(self.ground_truth)


def hungarian(cost) -> np.ndarray:
    """Minimum-cost one-to-one assignment of rows to columns.

    Returns, for each row, its assigned column, or -1 when R > C leaves the
    row unmatched (rectangular inputs are padded square with zero cost).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise InputError(f"cost must be a nonempty 2-D matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise InputError("cost matrix contains non-finite entries")
    r, c = cost.shape
    m = max(r, c)
    padded = np.zeros((m, m))
    padded[:r, :c] = cost
    rows, cols = linear_sum_assignment(padded)
    out = np.full(r, -1, dtype=np.int64)
    for i, j in zip(rows, cols):
        if i < r and j < c:
            out[i] = j
    return out


def contingency_matrix(ground_truth, predicted, L, K) -> np.ndarray:
    mat = np.zeros((L, K), dtype=np.int64)
    np.add.at(mat, (ground_truth, predicted), 1)
    return mat


def clustering_accuracy(ground_truth, predicted, L=None, K=None) -> ClusterEval:
    """Best-map accuracy, maximized over one-to-one cluster-to-label mappings."""
    gt = np.asarray(ground_truth, dtype=np.int64)
    pred = np.asarray(predicted, dtype=np.int64)
    if gt.ndim != 1 or pred.ndim != 1 or len(gt) != len(pred):
        raise InputError(
            f"label sequences must be 1-D and equal length, "
            f"got {gt.shape} and {pred.shape}")
    if len(gt) == 0:
        raise InputError("need at least one example")
    if gt.min() < 0 or pred.min() < 0:
        raise InputError("labels must be nonnegative")
    if L is None:
        L = int(gt.max()) + 1
    if K is None:
        K = int(pred.max()) + 1
    if gt.max() >= L:
        raise InputError(f"ground-truth label {gt.max()} out of range [0, {L})")
    if pred.max() >= K:
        raise InputError(f"predicted id {pred.max()} out of range [0, {K})")
    cont = contingency_matrix(gt, pred, L, K)
    # maximize matched counts == minimize negated counts
    label_for_cluster = hungarian(-cont.T.astype(np.float64))
    correct = 0
    for c in range(K):
        if label_for_cluster[c] >= 0:
            correct += cont[label_for_cluster[c], c]
    return ClusterEval(
        ground_truth=gt, predicted=pred, contingency=cont,
        mapping=label_for_cluster, acc=float(correct) / len(gt))


def write_eval_csv(ev: ClusterEval, path, contingency_path=None):
    """Emit `acc,n,k,l` plus (optionally) the contingency matrix."""
    L, K = ev.contingency.shape
    with open(path, "w") as fh:
        fh.write("acc,n,k,l\n")
        fh.write(f"{repr(float(ev.acc))},{ev.n},{K},{L}\n")
    if contingency_path is not None:
        with open(contingency_path, "w") as fh:
            for row in ev.contingency:
                fh.write(",".join(str(int(v)) for v in row) + "\n")
