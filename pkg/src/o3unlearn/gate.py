"""Soft-weighted inference.

Each detector turns an input into a boundary distance ``d``. The boundary
distances of a request's used and rest splits are summarized by an
equal-weight mixture of two Gaussians; with ``P`` its CDF and ``d0`` its
median, the weight is ``sigmoid(zeta * (1 - |P(d) - P(2 d0 - d)|))``. The
largest weight over detectors scales the unlearning LoRA of the target model.

Note the sigmoid argument is never negative, so soft weights live in
``(0.5, sigmoid(zeta)]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import expit, ndtr

from .backbone import BOS_ID, BackboneConfig, Params, forward
from .lora import AdapterSet, LoraStack
from .scoring import DEFAULT_GAMMA, Hypersphere, IdBank, StoredScores, boundary_distance, encode_reps, score_reps

SIGMA_FLOOR = 1e-6
SOFT, HARD = "soft", "hard"


@dataclass
class MixedGaussian:
    mu_used: float
    sigma_used: float
    mu_rest: float
    sigma_rest: float
    center: float

    def cdf(self, d):
        d = np.asarray(d, dtype=np.float64)
        p = 0.5 * ndtr((d - self.mu_used) / self.sigma_used) + 0.5 * ndtr((d - self.mu_rest) / self.sigma_rest)
        return float(p) if p.ndim == 0 else p


def _mixture_median(mu1: float, s1: float, mu2: float, s2: float) -> float:
    def cdf(d):
        return 0.5 * ndtr((d - mu1) / s1) + 0.5 * ndtr((d - mu2) / s2)

    spread = 10.0 * max(s1, s2)
    lo, hi = min(mu1, mu2) - spread, max(mu1, mu2) + spread
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if cdf(mid) < 0.5:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fit_mixture(used_distances, rest_distances) -> MixedGaussian:
    """Equal-weight two-Gaussian mixture over boundary distances and its median."""
    u = np.asarray(used_distances, dtype=np.float64)
    r = np.asarray(rest_distances, dtype=np.float64)
    if u.size == 0 or r.size == 0:
        raise ValueError("fit_mixture needs non-empty used and rest distance lists")
    mu_u, mu_r = float(u.mean()), float(r.mean())
    s_u, s_r = max(float(u.std()), SIGMA_FLOOR), max(float(r.std()), SIGMA_FLOOR)
    return MixedGaussian(mu_u, s_u, mu_r, s_r, _mixture_median(mu_u, s_u, mu_r, s_r))


def soft_weight(d, mix: MixedGaussian, zeta: float = 10.0):
    d = np.asarray(d, dtype=np.float64)
    p = mix.cdf(d)
    p_ref = mix.cdf(2.0 * mix.center - d)
    w = expit(zeta * (1.0 - np.abs(np.asarray(p) - np.asarray(p_ref))))
    return float(w) if np.ndim(w) == 0 else w


@dataclass
class GateConfig:
    zeta: float = 10.0
    mode: str = SOFT

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if self.mode not in (SOFT, HARD):
            raise ValueError(f"gate mode must be 'soft' or 'hard', got {self.mode!r}")


@dataclass
class DetectorState:
    request_index: int
    adapters: AdapterSet
    bank: IdBank
    sphere: Hypersphere
    stored: StoredScores
    mixture: MixedGaussian
    hard_range: tuple[float, float]
    gamma: float = DEFAULT_GAMMA

    def boundary_distances(self, params: Params, cfg: BackboneConfig, seqs) -> np.ndarray:
        reps = encode_reps(params, cfg, self.adapters, seqs)
        return np.atleast_1d(boundary_distance(score_reps(reps, self.bank, self.gamma), self.sphere))


def weights_from_distances(d, state: DetectorState, gcfg: GateConfig) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if gcfg.mode == HARD:
        lo, hi = state.hard_range
        return ((d >= lo) & (d <= hi)).astype(np.float64)
    return np.atleast_1d(soft_weight(d, state.mixture, gcfg.zeta))


def detector_weights(seqs, state: DetectorState, enc_params: Params, enc_cfg: BackboneConfig,
                     gcfg: GateConfig) -> np.ndarray:
    """Per-input weight from one detector for a batch of encoder inputs."""
    return weights_from_distances(state.boundary_distances(enc_params, enc_cfg, seqs), state, gcfg)


def detector_weight(x, state: DetectorState, enc_params: Params, enc_cfg: BackboneConfig,
                    gcfg: GateConfig) -> float:
    return float(detector_weights([list(x)], state, enc_params, enc_cfg, gcfg)[0])


def gated_weights(seqs, detectors: list[DetectorState], enc_params: Params, enc_cfg: BackboneConfig,
                  gcfg: GateConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(w, per_detector)``: max over detectors, shape (N,), and the (N, T) matrix."""
    if not detectors:
        raise ValueError("gated inference needs at least one detector")
    per = np.stack([detector_weights(seqs, st, enc_params, enc_cfg, gcfg) for st in detectors], axis=1)
    return per.max(axis=1), per


def target_logits(params: Params, cfg: BackboneConfig, prompts, adapters: AdapterSet | None,
                  weights=None, batch_size: int = 256) -> np.ndarray:
    """Next-token logits after ``[BOS] prompt`` with per-input LoRA weights.

    ``weights`` is None (full adapter), a scalar or one value per prompt.
    An input whose weight is exactly 0 runs without the adapter path at all.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    n = prompts.shape[0]
    ids = np.concatenate([np.full((n, 1), BOS_ID, dtype=np.int64), prompts], axis=1)
    w = np.ones(n) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), (n,))
    out = np.empty((n, cfg.vocab_size))
    with torch.no_grad():
        zero = w == 0.0
        for mask, ad in ((zero, None), (~zero, adapters)):
            rows = np.flatnonzero(mask)
            for s in range(0, rows.size, batch_size):
                sel = rows[s:s + batch_size]
                wt = torch.from_numpy(w[sel].copy()).view(-1, 1, 1) if ad is not None else 0.0
                logits, _ = forward(params, cfg, torch.from_numpy(ids[sel]), ad, wt)
                out[sel] = logits[:, -1, :].numpy()
    return out


def greedy_decode(params: Params, cfg: BackboneConfig, prompt, adapters: AdapterSet | None,
                  weight: float, max_new: int = 4) -> list[int]:
    ids = [BOS_ID] + [int(t) for t in prompt]
    out = []
    with torch.no_grad():
        for _ in range(max_new):
            if len(ids) > cfg.max_len:
                break
            logits, _ = forward(params, cfg, [ids], adapters if weight != 0.0 else None, weight)
            nxt = int(torch.argmax(logits[0, -1]))
            out.append(nxt)
            ids.append(nxt)
    return out


def gated_infer(x, detectors: list[DetectorState], target_params: Params, target_cfg: BackboneConfig,
                stack: LoraStack, enc_params: Params, enc_cfg: BackboneConfig, gcfg: GateConfig,
                options=None, enc_input=None, max_new: int = 4) -> dict:
    """Gate one input through every detector and run the weighted target model.

    With ``options`` (token ids) the result carries per-option logits and the
    argmax option; otherwise greedy decoding of ``max_new`` tokens.
    ``enc_input`` defaults to ``[BOS] x``.
    """
    x = [int(t) for t in x]
    enc = enc_input if enc_input is not None else [BOS_ID] + x
    w_all, per = gated_weights([enc], detectors, enc_params, enc_cfg, gcfg)
    w = float(w_all[0])
    result = {"w": w, "weights": [float(v) for v in per[0]]}
    if options is not None:
        logits = target_logits(target_params, target_cfg, [x], stack.current, [w])[0]
        opt_logits = logits[np.asarray(options)]
        result["option_logits"] = opt_logits.tolist()
        result["prediction"] = int(np.asarray(options)[int(np.argmax(opt_logits))])
    else:
        result["tokens"] = greedy_decode(target_params, target_cfg, x, stack.current, w, max_new)
    return result
