"""Continual unlearning protocol on the synthetic benchmark.

Stage 0 pre-trains the target model (next-token LM over question + answer)
and the detector encoder (MLM over questions) on the union of all domains.
Each request ``t`` then crafts labels for domain ``t``'s train split, trains
the shared LoRA, trains a detector on the used split, fits scoring, sphere
and mixture, and evaluates every metric through the gate.

Domains ``0..T-1`` are the unlearning requests, domain ``T`` is the retained
distribution and ``T+1``, ``T+2`` are the two utility sets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..backbone import BOS_ID, N_RESERVED, BackboneConfig, Params, init_params, lm_loss, mask_tokens, masked_lm_loss
from ..detector import DetectorTrainConfig, split_dataset, train_detector
from ..gate import DetectorState, GateConfig, fit_mixture, gated_weights, target_logits
from ..lora import LoraStack, init_adapter_set
from ..numeric import make_rng
from ..scoring import StoredScores, bank_from_reps, boundary_distance, encode_reps, fit_hypersphere, score_reps
from ..unlearner import TrainConfig, UnlearnRequest, craft_labels, unlearn_request
from .config import RunConfig
from .metrics import accuracy, auroc, u2r
from .synthetic import QASet, SyntheticSpec, gen_synthetic

log = logging.getLogger(__name__)

UTILITY_KEYS = ("rd", "u1", "u2")


class StageError(RuntimeError):
    """Failure inside one protocol stage; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    d = cfg.data
    return SyntheticSpec(n_domains=d.n_requests + 3, n_options=d.n_options, tokens_per_domain=d.tokens_per_domain,
                         shared_tokens=d.shared_tokens, seq_len=d.seq_len, temperature=d.temperature,
                         option_bias=d.option_bias, shared_penalty=d.shared_penalty, n_train=d.n_train,
                         n_test=d.n_test, seed=cfg.run.seed)


def option_ids(cfg: RunConfig) -> list[int]:
    """Answer option tokens follow the reserved ids."""
    return list(range(N_RESERVED, N_RESERVED + cfg.data.n_options))


def model_configs(cfg: RunConfig, spec: SyntheticSpec) -> tuple[BackboneConfig, BackboneConfig]:
    m = cfg.model
    common = dict(vocab_size=spec.vocab_size, d_model=m.d_model, n_layers=m.n_layers, n_heads=m.n_heads,
                  max_len=m.max_len)
    return BackboneConfig(causal=True, **common), BackboneConfig(causal=False, **common)


@dataclass
class Benchmark:
    spec: SyntheticSpec
    data: dict[int, tuple[QASet, QASet]]
    n_requests: int

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Benchmark":
        spec = synthetic_spec(cfg)
        return cls(spec, gen_synthetic(spec), cfg.data.n_requests)

    def request_train(self, t: int) -> QASet:
        return self.data[t - 1][0]

    def request_test(self, t: int) -> QASet:
        return self.data[t - 1][1]

    def utility_sets(self) -> dict[str, QASet]:
        T = self.n_requests
        return {"rd": self.data[T][1], "u1": self.data[T + 1][1], "u2": self.data[T + 2][1]}


def encoder_inputs(prompts: np.ndarray) -> np.ndarray:
    prompts = np.asarray(prompts, dtype=np.int64)
    return np.concatenate([np.full((prompts.shape[0], 1), BOS_ID, dtype=np.int64), prompts], axis=1)


def _adam(tensors, lr):
    return torch.optim.AdamW(tensors, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


def pretrain_target(cfg: RunConfig, bench: Benchmark, mcfg: BackboneConfig) -> Params:
    rng = make_rng(cfg.run.seed, "pretrain-target")
    params = init_params(mcfg, rng)
    sets = [bench.data[d][0] for d in sorted(bench.data)]
    prompts = np.concatenate([s.prompts for s in sets])
    answers = np.concatenate([s.answers for s in sets])
    full = np.concatenate([np.full((len(prompts), 1), BOS_ID), prompts, answers[:, None]], axis=1)
    inputs, targets = torch.from_numpy(full[:, :-1]), torch.from_numpy(full[:, 1:])
    tensors = [params[k] for k in sorted(params)]
    for t in tensors:
        t.requires_grad_(True)
    opt = _adam(tensors, cfg.model.pretrain_lr)
    n, bs = len(full), cfg.model.pretrain_batch
    for _ in range(cfg.model.pretrain_epochs):
        order = torch.from_numpy(rng.permutation(n))
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            opt.zero_grad(set_to_none=True)
            loss = lm_loss(params, mcfg, None, inputs[idx], targets[idx])
            loss.backward()
            opt.step()
    for t in tensors:
        t.requires_grad_(False)
    return params


def pretrain_encoder(cfg: RunConfig, bench: Benchmark, ecfg: BackboneConfig) -> Params:
    rng = make_rng(cfg.run.seed, "pretrain-encoder")
    params = init_params(ecfg, rng)
    seqs = encoder_inputs(np.concatenate([bench.data[d][0].prompts for d in sorted(bench.data)]))
    tensors = [params[k] for k in sorted(params)]
    for t in tensors:
        t.requires_grad_(True)
    opt = _adam(tensors, cfg.model.encoder_lr)
    n, bs = len(seqs), cfg.model.pretrain_batch
    for _ in range(cfg.model.encoder_epochs):
        order = rng.permutation(n)
        for s in range(0, n, bs):
            batch = seqs[order[s:s + bs]]
            masked, labels = mask_tokens(batch, cfg.detector.mask_percent, rng, ecfg.mask_token_id)
            opt.zero_grad(set_to_none=True)
            loss = masked_lm_loss(params, ecfg, None, masked, labels)
            loss.backward()
            opt.step()
    for t in tensors:
        t.requires_grad_(False)
    return params


@dataclass
class RunState:
    """Everything needed to continue or evaluate a run; holds no raw request data."""

    cfg: RunConfig
    target_cfg: BackboneConfig
    encoder_cfg: BackboneConfig
    target_params: Params
    encoder_params: Params
    stack: LoraStack
    detectors: list[DetectorState] = field(default_factory=list)
    base: dict = field(default_factory=dict)
    stages: list[dict] = field(default_factory=list)

    @property
    def completed(self) -> int:
        return self.stack.request_index


def pretrain(cfg: RunConfig, bench: Benchmark | None = None) -> RunState:
    bench = bench or Benchmark.from_config(cfg)
    tcfg, ecfg = model_configs(cfg, bench.spec)
    try:
        target = pretrain_target(cfg, bench, tcfg)
        encoder = pretrain_encoder(cfg, bench, ecfg)
    except Exception as exc:  # noqa: BLE001
        raise StageError("pretrain", str(exc)) from exc
    init = init_adapter_set(tcfg.lora_shapes(), make_rng(cfg.run.seed, "unlearn-lora-init"),
                            cfg.unlearn.rank, cfg.unlearn.lora_alpha)
    state = RunState(cfg, tcfg, ecfg, target, encoder, LoraStack(init))
    state.base = evaluate(state, bench, gated=False)
    return state


def _train_config(cfg: RunConfig) -> TrainConfig:
    u = cfg.unlearn
    return TrainConfig(learning_rate=u.learning_rate, batch_size=u.batch_size, epochs=u.epochs,
                       lambda_orth=u.lambda_orth, seed=cfg.run.seed, label_mode=u.label_mode,
                       orth_previous_only=u.orth_previous_only)


def _detector_config(cfg: RunConfig) -> DetectorTrainConfig:
    d = cfg.detector
    return DetectorTrainConfig(epochs=d.epochs, batch_size=d.batch_size, learning_rate=d.learning_rate,
                               mask_percent=d.mask_percent, momentum=d.momentum, temperature=d.temperature,
                               scale_reps=d.scale_reps, rank=d.rank, lora_alpha=d.lora_alpha, seed=cfg.run.seed)


def fit_detector_state(state: RunState, t: int, seqs: np.ndarray, split) -> tuple[DetectorState, list]:
    """Train detector ``t`` and fit its bank, sphere, mixture and hard range."""
    cfg = state.cfg
    det, trace = train_detector(state.encoder_params, state.encoder_cfg, seqs[split.used], _detector_config(cfg), t)
    reps = encode_reps(state.encoder_params, state.encoder_cfg, det.adapters, seqs)
    bank = bank_from_reps(reps[split.used])
    scores = score_reps(reps, bank, cfg.scoring.gamma)
    stored = StoredScores(scores[split.used], scores[split.rest])
    sphere = fit_hypersphere(stored.used_scores, cfg.scoring.nu)
    d_used = np.atleast_1d(boundary_distance(stored.used_scores, sphere))
    d_rest = np.atleast_1d(boundary_distance(stored.rest_scores, sphere))
    mixture = fit_mixture(d_used, d_rest)
    all_d = np.concatenate([d_used, d_rest])
    st = DetectorState(t, det.adapters, bank, sphere, stored, mixture,
                       (float(all_d.min()), float(all_d.max())), cfg.scoring.gamma)
    return st, trace


def run_request(state: RunState, bench: Benchmark) -> dict:
    """Process the next unlearning request in place; returns per-stage diagnostics."""
    cfg = state.cfg
    t = state.completed + 1
    if t > bench.n_requests:
        raise StageError("unlearn", f"all {bench.n_requests} requests already processed")
    train = bench.request_train(t)
    try:
        crafted = craft_labels(train.answers.tolist(), cfg.unlearn.label_mode, bench.spec.option_ids,
                               [[BOS_ID]], make_rng(cfg.run.seed, "craft", t))
        request = UnlearnRequest(t, list(train.prompts), train.answers.tolist(), crafted)
        state.stack.begin_request()
        _, trace = unlearn_request(state.target_params, state.target_cfg, state.stack, request, _train_config(cfg))
    except Exception as exc:  # noqa: BLE001
        raise StageError("unlearn", str(exc)) from exc
    try:
        seqs = encoder_inputs(train.prompts)
        split = split_dataset(len(seqs), cfg.detector.alpha_split, make_rng(cfg.run.seed, "split", t))
        det_state, det_trace = fit_detector_state(state, t, seqs, split)
    except Exception as exc:  # noqa: BLE001
        raise StageError("detector", str(exc)) from exc
    state.detectors.append(det_state)
    try:
        stage = evaluate(state, bench, gated=True)
    except Exception as exc:  # noqa: BLE001
        raise StageError("evaluate", str(exc)) from exc
    stage["request"] = t
    stage["orth_to_previous"] = state.stack.orth_to_previous()
    stage["unlearn_loss"] = {"first_ce": trace[0]["l_ce"] if trace else None,
                             "last_ce": trace[-1]["l_ce"] if trace else None}
    stage["detector_loss"] = {"first_ood": det_trace[0]["l_ood"] if det_trace else None,
                              "last_ood": det_trace[-1]["l_ood"] if det_trace else None,
                              "first_cel": det_trace[0]["l_cel"] if det_trace else None,
                              "last_cel": det_trace[-1]["l_cel"] if det_trace else None}
    stage["auroc"] = detector_aurocs(state, bench, det_state)
    state.stages.append(stage)
    return {"unlearn_trace": trace, "detector_trace": det_trace}


def predict(state: RunState, prompts: np.ndarray, gated: bool, gate: GateConfig | None = None,
            weights=None) -> np.ndarray:
    """Predicted option tokens; ungated means the base model without adapter."""
    options = np.asarray(option_ids(state.cfg))
    if not gated:
        w = np.zeros(len(prompts))
    elif weights is not None:
        w = np.asarray(weights, dtype=np.float64)
    else:
        gate = gate or GateConfig(state.cfg.gate.zeta, state.cfg.gate.mode)
        w, _ = gated_weights(encoder_inputs(prompts), state.detectors, state.encoder_params,
                             state.encoder_cfg, gate)
    logits = target_logits(state.target_params, state.target_cfg, prompts, state.stack.current, w)
    return options[np.argmax(logits[:, options], axis=1)]


def evaluate(state: RunState, bench: Benchmark, gated: bool = True, gate: GateConfig | None = None) -> dict:
    """S.U./D.U. per request plus R.D., U.1, U.2 accuracies."""
    use_gate = gated and bool(state.detectors)
    out = {"su": [], "du": []}
    for t in range(1, bench.n_requests + 1):
        for key, ds in (("su", bench.request_train(t)), ("du", bench.request_test(t))):
            out[key].append(accuracy(predict(state, ds.prompts, use_gate, gate), ds.answers))
    for key, ds in bench.utility_sets().items():
        out[key] = accuracy(predict(state, ds.prompts, use_gate, gate), ds.answers)
    return out


def detector_aurocs(state: RunState, bench: Benchmark, det: DetectorState) -> dict:
    """AUROC of boundary distance: request test set (ID) vs each utility set (OOD)."""
    id_d = det.boundary_distances(state.encoder_params, state.encoder_cfg,
                                  encoder_inputs(bench.request_test(det.request_index).prompts))
    return {key: auroc(id_d, det.boundary_distances(state.encoder_params, state.encoder_cfg,
                                                    encoder_inputs(ds.prompts)))
            for key, ds in bench.utility_sets().items()}


def run_continual(cfg: RunConfig, state: RunState | None = None, until: int | None = None,
                  on_request=None) -> RunState:
    """Pre-train (unless resuming from ``state``) and process requests up to ``until``."""
    bench = Benchmark.from_config(cfg)
    if state is None:
        state = pretrain(cfg, bench)
    last = bench.n_requests if until is None else min(until, bench.n_requests)
    while state.completed < last:
        run_request(state, bench)
        if on_request is not None:
            on_request(state)
    return state


def build_report(state: RunState) -> dict:
    cfg = state.cfg
    final = state.stages[-1] if state.stages else state.base
    T = len(state.stages)
    report = {
        "seed": cfg.run.seed,
        "config_hash": cfg.config_hash(),
        "n_requests": T,
        "base": _plain(state.base),
        "stages": [_plain(s) for s in state.stages],
    }
    if T:
        per_request = []
        for t in range(1, T + 1):
            per_request.append({"request": t, "su": final["su"][t - 1], "du": final["du"][t - 1],
                                "rd": final["rd"], "u1": final["u1"], "u2": final["u2"],
                                "base_su": state.base["su"][t - 1], "base_du": state.base["du"][t - 1],
                                "auroc": state.stages[t - 1]["auroc"]})
        report["per_request"] = per_request
        base_sel = {k: state.base[k][:T] if k in ("su", "du") else state.base[k] for k in state.base}
        final_sel = {k: final[k][:T] if k in ("su", "du") else final[k] for k in final if k in state.base}
        report["u2r"] = u2r(base_sel, final_sel)
    return report


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
