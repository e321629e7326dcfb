"""Representation learning for the per-request unlearned-knowledge detectors.

A fresh LoRA on the frozen encoder backbone is trained on the ``used`` split
of a request with ``L_OOD = L_CEL + L_MLM``: masked views go through the
query encoder, originals through a momentum key encoder (same backbone, its
own adapter copy), and the contrastive entropy is taken per layer over the
softmax of query-key dot products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import BackboneConfig, Params, as_ids, layer_reps, mask_tokens, masked_lm_loss
from .lora import AdapterSet, adapter_tensors, clone_adapters, init_adapter_set
from .numeric import make_rng


@dataclass
class SplitDataset:
    used: list[int]
    rest: list[int]
    alpha: float


def split_dataset(n: int, alpha: float, rng: np.random.Generator) -> SplitDataset:
    """Random partition of ``range(n)`` into ``round(alpha * n)`` used and the rest.

    Both sides keep at least one index, since the rest split feeds the
    weighting mixture.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    n_used = min(max(int(math.floor(alpha * n + 0.5)), 1), n - 1)
    perm = rng.permutation(n)
    return SplitDataset(sorted(int(i) for i in perm[:n_used]), sorted(int(i) for i in perm[n_used:]), alpha)


def cel_loss(query: torch.Tensor, key: torch.Tensor, temperature: float = 1.0,
             scale_reps: bool = True) -> torch.Tensor:
    """Contrastive entropy summed over batch items and layers.

    ``query`` and ``key`` are (B, L, d) token-averaged layer reps of the masked
    views and of the originals. For each layer, row ``i`` of the softmax over
    ``j`` of ``q_i . k_j`` contributes its entropy. The key side is detached.
    With ``scale_reps`` both sides are divided by sqrt(d) before the product.
    """
    if query.shape != key.shape:
        raise ValueError(f"query/key rep shapes differ: {tuple(query.shape)} vs {tuple(key.shape)}")
    key = key.detach()
    logits = torch.einsum("ild,jld->lij", query, key)
    if scale_reps:
        logits = logits / query.shape[-1]
    logits = logits / temperature
    logp = torch.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum()


def cel_loss_and_grad(query, key, temperature: float = 1.0, scale_reps: bool = True):
    """numpy front end: ``(loss, d loss / d query)``; key receives no gradient."""
    q = torch.tensor(np.asarray(query, dtype=np.float64), requires_grad=True)
    k = torch.tensor(np.asarray(key, dtype=np.float64), requires_grad=True)
    loss = cel_loss(q, k, temperature, scale_reps)
    loss.backward()
    assert k.grad is None
    return float(loss.detach()), q.grad.numpy().copy()


def softmax_peak(query: torch.Tensor, key: torch.Tensor, temperature: float = 1.0,
                 scale_reps: bool = True) -> float:
    """Mean over (i, l) of max_j of the contrastive softmax; 1 means fully peaked."""
    logits = torch.einsum("ild,jld->lij", query, key)
    if scale_reps:
        logits = logits / query.shape[-1]
    probs = torch.softmax(logits / temperature, dim=-1)
    return float(probs.max(dim=-1).values.mean())


@dataclass
class KeyEncoder:
    adapters: AdapterSet
    momentum: float = 0.99


def momentum_update(key: KeyEncoder, query: AdapterSet, m: float | None = None) -> KeyEncoder:
    """In place: every key tensor <- m * key + (1 - m) * query."""
    m = key.momentum if m is None else m
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if set(key.adapters) != set(query):
        raise ValueError("key and query adapters cover different sites")
    with torch.no_grad():
        for site, kad in key.adapters.items():
            qad = query[site]
            if kad.a.shape != qad.a.shape or kad.b.shape != qad.b.shape:
                raise ValueError(f"shape mismatch at {site}")
            kad.a.mul_(m).add_(qad.a.detach(), alpha=1.0 - m)
            kad.b.mul_(m).add_(qad.b.detach(), alpha=1.0 - m)
    return key


@dataclass
class DetectorTrainConfig:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 3e-3
    mask_percent: float = 15.0
    momentum: float = 0.99
    temperature: float = 1.0
    scale_reps: bool = True
    rank: int = 8
    lora_alpha: float = 16.0
    seed: int = 0


@dataclass
class DetectorLora:
    adapters: AdapterSet
    key: KeyEncoder


def train_detector(params: Params, cfg: BackboneConfig, used, dcfg: DetectorTrainConfig,
                   request_index: int = 1):
    """Train a fresh detector LoRA on ``used`` (equal-length encoder inputs).

    Returns ``(DetectorLora, trace)``; ``trace`` holds per-step ``l_cel``,
    ``l_mlm`` and ``l_ood``.
    """
    used = np.asarray(used, dtype=np.int64)
    if used.ndim != 2 or used.shape[0] == 0:
        raise ValueError("train_detector needs a non-empty 2-D batch of sequences")
    if cfg.causal:
        raise ValueError("detector backbone must be an encoder")
    init_rng = make_rng(dcfg.seed, "detector-init", request_index)
    query = init_adapter_set(cfg.lora_shapes(), init_rng, dcfg.rank, dcfg.lora_alpha)
    key = KeyEncoder(clone_adapters(query), dcfg.momentum)
    frozen = {k: v.detach() for k, v in params.items()}
    tensors = adapter_tensors(query)
    for t in tensors:
        t.requires_grad_(True)
    opt = torch.optim.AdamW(tensors, lr=dcfg.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    rng = make_rng(dcfg.seed, "detector-train", request_index)
    n = used.shape[0]
    trace = []
    for _ in range(dcfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, dcfg.batch_size):
            batch = used[order[s:s + dcfg.batch_size]]
            masked, labels = mask_tokens(batch, dcfg.mask_percent, rng, cfg.mask_token_id)
            opt.zero_grad(set_to_none=True)
            with torch.no_grad():
                k_reps = layer_reps(frozen, cfg, as_ids(batch), key.adapters)
            q_reps = layer_reps(frozen, cfg, as_ids(masked), query)
            l_cel = cel_loss(q_reps, k_reps, dcfg.temperature, dcfg.scale_reps)
            l_mlm = masked_lm_loss(frozen, cfg, query, masked, labels)
            total = l_cel + l_mlm
            total.backward()
            opt.step()
            momentum_update(key, query)
            trace.append({"l_cel": float(l_cel.detach()), "l_mlm": float(l_mlm.detach()),
                          "l_ood": float(total.detach())})
    for t in tensors:
        t.requires_grad_(False)
    return DetectorLora(query, key), trace
