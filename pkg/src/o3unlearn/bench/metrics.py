"""Accuracy, unlearning-utility ratio and AUROC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

U2R_UNDEFINED = "undefined (no utility change)"


def accuracy(predictions, truth) -> float:
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if truth.size == 0:
        raise ValueError("accuracy of an empty dataset")
    if predictions.shape != truth.shape:
        raise ValueError("predictions and ground truth differ in length")
    return float(np.mean(predictions == truth))


def u2r(base: dict, final: dict):
    """``(drop in S.U. + D.U.) / (drop in R.D. + U.1 + U.2)``.

    ``base``/``final`` map ``su, du, rd, u1, u2`` to accuracies (``su``/``du``
    may be per-request lists; they are summed). Returns the
    :data:`U2R_UNDEFINED` sentinel when the utility drop is exactly zero.
    """
    def total(acc, key):
        return float(np.sum(acc[key]))

    num = total(base, "su") + total(base, "du") - total(final, "su") - total(final, "du")
    den = sum(total(base, k) for k in ("rd", "u1", "u2")) - sum(total(final, k) for k in ("rd", "u1", "u2"))
    if den == 0.0:
        return U2R_UNDEFINED
    return num / den


def auroc(id_scores, ood_scores) -> float:
    """P(random OOD score > random ID score), ties counting one half."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValueError("auroc needs non-empty ID and OOD score lists")
    ranks = rankdata(np.concatenate([ood_scores, id_scores]))
    n_ood, n_id = ood_scores.size, id_scores.size
    u = ranks[:n_ood].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_ood * n_id))
