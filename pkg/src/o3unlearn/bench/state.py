"""Run-state persistence in the ``o3-state-v1`` container.

Stored: both backbones, the shared unlearning adapter and its A history, and
per request the detector adapter, ID bank, Gaussian stats, hypersphere,
stored score vectors, mixture and hard range. Scalars, configs and the
evaluation history go into the JSON header (floats round-trip exactly via
``repr``). Raw request tokens are never written.
"""

from __future__ import annotations

import numpy as np
import torch

from ..backbone import BackboneConfig, params_from_records, params_to_records
from ..gate import DetectorState, MixedGaussian
from ..lora import AdapterSet, LoraAdapter, LoraStack
from ..numeric import GaussianStats
from ..scoring import Hypersphere, IdBank, StoredScores
from ..store import STATE_FORMAT, dump_container, load_container
from .config import RunConfig
from .pipeline import RunState


def _adapters_to_records(adapters: AdapterSet, prefix: str) -> tuple[dict, dict]:
    records, alphas = {}, {}
    for site, ad in adapters.items():
        records[f"{prefix}{site}.a"] = ad.a.detach().numpy()
        records[f"{prefix}{site}.b"] = ad.b.detach().numpy()
        alphas[site] = ad.alpha
    return records, alphas


def _adapters_from_records(records: dict, prefix: str, alphas: dict) -> AdapterSet:
    return {site: LoraAdapter(torch.from_numpy(records[f"{prefix}{site}.a"].copy()),
                              torch.from_numpy(records[f"{prefix}{site}.b"].copy()), alpha, site)
            for site, alpha in sorted(alphas.items())}


def _detector_records(det: DetectorState) -> tuple[dict, dict]:
    p = f"det{det.request_index}."
    records, alphas = _adapters_to_records(det.adapters, p + "lora.")
    records[p + "bank.reps"] = det.bank.reps
    for l, st in enumerate(det.bank.stats):
        records[f"{p}stats.{l}.mean"] = st.mean
        records[f"{p}stats.{l}.covariance"] = st.covariance
        records[f"{p}stats.{l}.precision"] = st.precision
    records[p + "sphere.center"] = det.sphere.center
    records[p + "sphere.duals"] = det.sphere.duals
    records[p + "stored.used"] = det.stored.used_scores
    records[p + "stored.rest"] = det.stored.rest_scores
    meta = {
        "request_index": det.request_index,
        "lora_alpha": alphas,
        "reg_epsilon": [st.reg_epsilon for st in det.bank.stats],
        "radius": det.sphere.radius,
        "nu": det.sphere.nu,
        "mixture": [det.mixture.mu_used, det.mixture.sigma_used, det.mixture.mu_rest, det.mixture.sigma_rest,
                    det.mixture.center],
        "hard_range": list(det.hard_range),
        "gamma": det.gamma,
    }
    return records, meta


def _detector_from_records(records: dict, meta: dict) -> DetectorState:
    t = meta["request_index"]
    p = f"det{t}."
    stats = [GaussianStats(records[f"{p}stats.{l}.mean"], records[f"{p}stats.{l}.covariance"],
                           records[f"{p}stats.{l}.precision"], eps)
             for l, eps in enumerate(meta["reg_epsilon"])]
    return DetectorState(
        request_index=t,
        adapters=_adapters_from_records(records, p + "lora.", meta["lora_alpha"]),
        bank=IdBank(records[p + "bank.reps"], stats),
        sphere=Hypersphere(records[p + "sphere.center"], meta["radius"], meta["nu"], records[p + "sphere.duals"]),
        stored=StoredScores(records[p + "stored.used"], records[p + "stored.rest"]),
        mixture=MixedGaussian(*meta["mixture"]),
        hard_range=tuple(meta["hard_range"]),
        gamma=meta["gamma"],
    )


def save_state(path, state: RunState) -> None:
    records = {}
    records.update(params_to_records(state.target_params, "target."))
    records.update(params_to_records(state.encoder_params, "encoder."))
    stack_records, stack_alphas = _adapters_to_records(state.stack.current, "stack.current.")
    records.update(stack_records)
    history_len = {}
    for site, snaps in state.stack.history_a.items():
        history_len[site] = len(snaps)
        for i, a in enumerate(snaps):
            records[f"stack.history.{site}.{i}"] = a.detach().numpy()
    detectors = []
    for det in state.detectors:
        rec, meta = _detector_records(det)
        records.update(rec)
        detectors.append(meta)
    meta = {
        "config": state.cfg.to_dict(),
        "target_cfg": state.target_cfg.to_dict(),
        "encoder_cfg": state.encoder_cfg.to_dict(),
        "stack": {"request_index": state.stack.request_index, "lora_alpha": stack_alphas,
                  "history_len": history_len},
        "detectors": detectors,
        "base": state.base,
        "stages": state.stages,
    }
    dump_container(path, STATE_FORMAT, records, meta)


def load_state(path) -> RunState:
    records, meta = load_container(path, STATE_FORMAT)
    st = meta["stack"]
    current = _adapters_from_records(records, "stack.current.", st["lora_alpha"])
    history = {site: [torch.from_numpy(records[f"stack.history.{site}.{i}"].copy()) for i in range(n)]
               for site, n in st["history_len"].items()}
    stack = LoraStack(current, history, st["request_index"])
    return RunState(
        cfg=RunConfig.from_dict(meta["config"]),
        target_cfg=BackboneConfig(**meta["target_cfg"]),
        encoder_cfg=BackboneConfig(**meta["encoder_cfg"]),
        target_params=params_from_records(records, "target."),
        encoder_params=params_from_records(records, "encoder."),
        stack=stack,
        detectors=[_detector_from_records(records, m) for m in meta["detectors"]],
        base=meta["base"],
        stages=meta["stages"],
    )
