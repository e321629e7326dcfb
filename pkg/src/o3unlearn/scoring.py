"""Glocal scoring of detector representations and the one-class hypersphere.

Per layer, a test representation gets the squared Mahalanobis distance to the
Gaussian fitted on the ID bank plus ``gamma`` times the negative max cosine
similarity to any bank row. The layer scores form a score vector; a linear
SVDD (soft minimum enclosing ball) over the ID score vectors gives the
hypersphere used for boundary distances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import BackboneConfig, Params, layer_reps
from .lora import AdapterSet
from .numeric import GaussianStats, fit_gaussian, mahalanobis_batch

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 1000.0
DEFAULT_NU = 0.1


@dataclass
class IdBank:
    reps: np.ndarray                # (L, N, d)
    stats: list[GaussianStats]      # one per layer

    @property
    def n_layers(self) -> int:
        return self.reps.shape[0]

    @property
    def size(self) -> int:
        return self.reps.shape[1]


def encode_reps(params: Params, cfg: BackboneConfig, adapters: AdapterSet | None, seqs,
                batch_size: int = 256) -> np.ndarray:
    """Layer reps of equal-length sequences as an (N, L, d) array."""
    seqs = np.asarray(seqs, dtype=np.int64)
    out = []
    with torch.no_grad():
        for s in range(0, seqs.shape[0], batch_size):
            out.append(layer_reps(params, cfg, torch.from_numpy(seqs[s:s + batch_size]), adapters).numpy())
    return np.concatenate(out, axis=0)


def bank_from_reps(reps: np.ndarray, reg_epsilon: float | None = None) -> IdBank:
    """Build a bank from (N, L, d) ID reps."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 3 or reps.shape[0] == 0:
        raise ValueError("no ID samples")
    by_layer = np.ascontiguousarray(reps.transpose(1, 0, 2))
    return IdBank(by_layer, [fit_gaussian(by_layer[l], reg_epsilon) for l in range(by_layer.shape[0])])


def build_id_bank(params: Params, cfg: BackboneConfig, adapters: AdapterSet | None, used_seqs,
                  reg_epsilon: float | None = None) -> IdBank:
    if len(used_seqs) == 0:
        raise ValueError("no ID samples")
    return bank_from_reps(encode_reps(params, cfg, adapters, used_seqs), reg_epsilon)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm representation (broken backbone?)")
    return m / norms


def cosine_distance(x_rep, bank_layer) -> float:
    """Negative max cosine similarity between ``x_rep`` and any bank row."""
    bank_layer = np.asarray(bank_layer, dtype=np.float64)
    if bank_layer.ndim != 2 or bank_layer.shape[0] == 0:
        raise ValueError("empty bank")
    x = _unit_rows(np.asarray(x_rep, dtype=np.float64)[None, :])[0]
    return -float(np.max(_unit_rows(bank_layer) @ x))


def score_reps(reps: np.ndarray, bank: IdBank, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Score vectors (N, L) for test reps (N, L, d)."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim == 2:
        reps = reps[None]
    if reps.shape[1] != bank.n_layers:
        raise ValueError("layer count mismatch between reps and bank")
    out = np.empty(reps.shape[:2])
    for l in range(bank.n_layers):
        x = reps[:, l, :]
        maha = mahalanobis_batch(x, bank.stats[l])
        cos = -np.max(_unit_rows(x) @ _unit_rows(bank.reps[l]).T, axis=1)
        out[:, l] = maha + gamma * cos
    return out


def score_vector(seq, params: Params, cfg: BackboneConfig, adapters: AdapterSet | None, bank: IdBank,
                 gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Layer-aggregated score vector (length L) of one sequence."""
    reps = encode_reps(params, cfg, adapters, [list(seq)])
    return score_reps(reps, bank, gamma)[0]


@dataclass
class Hypersphere:
    center: np.ndarray
    radius: float
    nu: float
    duals: np.ndarray


def svdd_dual_objective(points: np.ndarray, duals: np.ndarray) -> float:
    """``sum a_i <s_i, s_i> - ||sum a_i s_i||^2`` (to be maximized)."""
    points = np.asarray(points, dtype=np.float64)
    c = duals @ points
    return float(duals @ np.einsum("ij,ij->i", points, points) - c @ c)


def fit_hypersphere(scores, nu: float = DEFAULT_NU, tol: float = 1e-8, max_sweeps: int = 10_000) -> Hypersphere:
    """Linear SVDD by pairwise coordinate ascent on the dual.

    Maximizes ``sum a_i K_ii - a^T K a`` over ``0 <= a_i <= 1/(nu N)``,
    ``sum a_i = 1``. Each update moves mass between the maximally violating
    pair; a sweep is N updates and the loop stops once a sweep changes no
    dual by more than ``tol`` (or the KKT gap closes).
    """
    pts = np.asarray(scores, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("need at least one score vector")
    if not 0.0 < nu <= 1.0:
        raise ValueError("nu must lie in (0, 1]")
    n = pts.shape[0]
    upper = 1.0 / (nu * n)
    if upper > 1.0:
        if nu * n < 1.0:
            log.warning("nu * N = %.3g < 1; clamping dual upper bound to 1", nu * n)
        upper = 1.0
    shift = pts.mean(axis=0)
    x = pts - shift
    k = x @ x.T
    diag = np.diag(k).copy()
    scale = max(float(diag.max()), 1e-300)
    a = np.full(n, 1.0 / n)
    # minimization form: f(a) = a^T K a - diag.a, gradient 2 K a - diag
    g = 2.0 * k @ a - diag
    eps_bound = 1e-15
    for _ in range(max_sweeps):
        biggest = 0.0
        done = False
        for _ in range(n):
            up = a < upper - eps_bound
            down = a > eps_bound
            if not up.any() or not down.any():
                done = True
                break
            i = int(np.flatnonzero(up)[np.argmin(g[up])])
            j = int(np.flatnonzero(down)[np.argmax(g[down])])
            gap = g[j] - g[i]
            if gap <= 1e-13 * scale:
                done = True
                break
            eta = k[i, i] + k[j, j] - 2.0 * k[i, j]
            step = gap / (2.0 * eta) if eta > 1e-300 else np.inf
            step = min(step, upper - a[i], a[j])
            a[i] += step
            a[j] -= step
            g += 2.0 * step * (k[:, i] - k[:, j])
            biggest = max(biggest, step)
        if done or biggest < tol:
            break
    a = np.clip(a, 0.0, upper)
    a /= a.sum()
    center = a @ x
    d2 = np.sum((x - center) ** 2, axis=1)
    bound_tol = 1e-9 * upper
    interior = (a > bound_tol) & (a < upper - bound_tol)
    if interior.any():
        r2 = float(d2[interior].mean())
    elif (a >= upper - bound_tol).any():
        r2 = float(d2[a >= upper - bound_tol].min())
    else:
        r2 = float(d2.max())
    return Hypersphere(center + shift, float(np.sqrt(max(r2, 0.0))), float(nu), a)


def boundary_distance(s, h: Hypersphere) -> float | np.ndarray:
    """``||s - c|| - R``; negative inside the sphere. Accepts (L,) or (N, L)."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != h.center.shape[0]:
        raise ValueError("score vector dimension does not match the hypersphere")
    d = np.linalg.norm(s - h.center, axis=-1) - h.radius
    return float(d) if np.ndim(d) == 0 else d


@dataclass
class StoredScores:
    used_scores: np.ndarray     # (N_used, L)
    rest_scores: np.ndarray     # (N_rest, L)
