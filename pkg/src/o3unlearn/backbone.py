"""Tiny pre-norm transformer in two configurations.

* causal decoder with an LM head: the target model that gets unlearned;
* bidirectional encoder with an MLM head: the OOD detector backbone.

Parameters live in a plain ``dict[str, torch.Tensor]`` (float64). Gradients
come from torch reverse-mode autodiff; :func:`o3unlearn.numeric.finite_diff_grad`
is the independent check. Low-rank adapters attach to the four attention
projections of every layer (sites ``"{layer}.wq"`` etc.).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .lora import AdapterSet, LoraAdapter, adapter_tensors, apply_linear

PAD_ID, MASK_ID, BOS_ID, UNK_ID = 0, 1, 2, 3
N_RESERVED = 4
IGNORE_INDEX = -100
ATTN_SITES = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 2
    max_len: int = 32
    causal: bool = True
    mask_token_id: int = MASK_ID
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < N_RESERVED:
            raise ValueError("vocab_size must be >= 4 (pad/mask/bos/unk are reserved)")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def lora_shapes(self) -> dict[str, tuple[int, int]]:
        return {f"{l}.{s}": (self.d_model, self.d_model)
                for l in range(self.n_layers) for s in ATTN_SITES}


Params = dict[str, torch.Tensor]


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> Params:
    d, h = cfg.d_model, cfg.ffn_mult * cfg.d_model
    std = 0.02
    proj_std = std / math.sqrt(2 * cfg.n_layers)

    def normal(*shape, s=std):
        return torch.from_numpy(rng.normal(0.0, s, size=shape))

    p: Params = {
        "tok_emb": normal(cfg.vocab_size, d, s=1.0 / math.sqrt(d)),
        "pos_emb": normal(cfg.max_len, d),
    }
    for l in range(cfg.n_layers):
        p[f"{l}.ln1_g"] = torch.ones(d, dtype=torch.float64)
        p[f"{l}.ln1_b"] = torch.zeros(d, dtype=torch.float64)
        p[f"{l}.wq"] = normal(d, d)
        p[f"{l}.wk"] = normal(d, d)
        p[f"{l}.wv"] = normal(d, d)
        p[f"{l}.wo"] = normal(d, d, s=proj_std)
        p[f"{l}.ln2_g"] = torch.ones(d, dtype=torch.float64)
        p[f"{l}.ln2_b"] = torch.zeros(d, dtype=torch.float64)
        p[f"{l}.w1"] = normal(h, d)
        p[f"{l}.b1"] = torch.zeros(h, dtype=torch.float64)
        p[f"{l}.w2"] = normal(d, h, s=proj_std)
        p[f"{l}.b2"] = torch.zeros(d, dtype=torch.float64)
    p["lnf_g"] = torch.ones(d, dtype=torch.float64)
    p["lnf_b"] = torch.zeros(d, dtype=torch.float64)
    p["head"] = normal(cfg.vocab_size, d)
    p["head_b"] = torch.zeros(cfg.vocab_size, dtype=torch.float64)
    return p


def set_trainable(tensors, flag: bool) -> None:
    for t in (tensors.values() if isinstance(tensors, dict) else tensors):
        t.requires_grad_(flag)


def clone_params(params: Params) -> Params:
    return {k: v.detach().clone() for k, v in params.items()}


def as_ids(seqs) -> torch.Tensor:
    """Batch of equal-length token id sequences -> (B, n) int64 tensor."""
    if isinstance(seqs, torch.Tensor):
        ids = seqs
    else:
        ids = torch.as_tensor(np.asarray(seqs, dtype=np.int64))
    if ids.ndim == 1:
        ids = ids.unsqueeze(0)
    return ids


def _check_ids(cfg: BackboneConfig, ids: torch.Tensor) -> None:
    n = ids.shape[1]
    if n < 1:
        raise ValueError("empty sequence")
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if int(ids.min()) < 0 or int(ids.max()) >= cfg.vocab_size:
        raise ValueError("token id out of range")


def forward(params: Params, cfg: BackboneConfig, ids, adapters: AdapterSet | None = None,
            weight: float | torch.Tensor = 1.0, with_logits: bool = True):
    """Run the transformer.

    Returns ``(logits, hidden)`` where ``hidden[l]`` is the (B, n, d) output of
    block ``l`` and ``logits`` is (B, n, vocab) (None if ``with_logits`` is off).
    """
    ids = as_ids(ids)
    _check_ids(cfg, ids)
    bsz, n = ids.shape
    d, nh = cfg.d_model, cfg.n_heads
    dh = d // nh
    ad = adapters or {}
    x = params["tok_emb"][ids] + params["pos_emb"][:n]
    if cfg.causal:
        mask = torch.ones(n, n, dtype=torch.bool).triu(1)
    hidden = []
    for l in range(cfg.n_layers):
        h = F.layer_norm(x, (d,), params[f"{l}.ln1_g"], params[f"{l}.ln1_b"])
        q = apply_linear(h, params[f"{l}.wq"], ad.get(f"{l}.wq"), weight)
        k = apply_linear(h, params[f"{l}.wk"], ad.get(f"{l}.wk"), weight)
        v = apply_linear(h, params[f"{l}.wv"], ad.get(f"{l}.wv"), weight)
        q = q.view(bsz, n, nh, dh).transpose(1, 2)
        k = k.view(bsz, n, nh, dh).transpose(1, 2)
        v = v.view(bsz, n, nh, dh).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        if cfg.causal:
            att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(bsz, n, d)
        x = x + apply_linear(y, params[f"{l}.wo"], ad.get(f"{l}.wo"), weight)
        h = F.layer_norm(x, (d,), params[f"{l}.ln2_g"], params[f"{l}.ln2_b"])
        h = F.gelu(h @ params[f"{l}.w1"].T + params[f"{l}.b1"])
        x = x + h @ params[f"{l}.w2"].T + params[f"{l}.b2"]
        hidden.append(x)
    logits = None
    if with_logits:
        xf = F.layer_norm(x, (d,), params["lnf_g"], params["lnf_b"])
        logits = xf @ params["head"].T + params["head_b"]
    return logits, hidden


def layer_reps(params: Params, cfg: BackboneConfig, ids, adapters: AdapterSet | None = None,
               weight: float | torch.Tensor = 1.0) -> torch.Tensor:
    """Token-averaged block outputs, shape (B, L, d)."""
    _, hidden = forward(params, cfg, ids, adapters, weight, with_logits=False)
    return torch.stack([h.mean(dim=1) for h in hidden], dim=1)


def forward_layer_reps(params: Params, cfg: BackboneConfig, seq: Sequence[int],
                       adapters: AdapterSet | None = None, weight: float = 1.0) -> np.ndarray:
    """(L, d_model) matrix whose row ``l`` is the mean over tokens of block ``l``."""
    with torch.no_grad():
        return layer_reps(params, cfg, [list(seq)], adapters, weight)[0].numpy().copy()


def token_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy over non-ignored positions."""
    targets = as_ids(targets)
    if not bool((targets != IGNORE_INDEX).any()):
        raise ValueError("empty loss: every position is ignored")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                           ignore_index=IGNORE_INDEX)


def lm_loss(params: Params, cfg: BackboneConfig, adapters: AdapterSet | None, ids, targets,
            weight: float | torch.Tensor = 1.0) -> torch.Tensor:
    if not cfg.causal:
        raise ValueError("lm loss needs a causal configuration")
    logits, _ = forward(params, cfg, ids, adapters, weight)
    return token_cross_entropy(logits, targets)


def masked_lm_loss(params: Params, cfg: BackboneConfig, adapters: AdapterSet | None, masked_ids,
                   mask_labels) -> torch.Tensor:
    if cfg.causal:
        raise ValueError("MLM loss needs an encoder (non-causal) configuration")
    labels = as_ids(mask_labels)
    if not bool((labels != IGNORE_INDEX).any()):
        raise ValueError("no masked positions")
    logits, _ = forward(params, cfg, masked_ids, adapters)
    return token_cross_entropy(logits, labels)


def _loss_and_grads(loss_fn, params: Params, adapters: AdapterSet | None, train_base: bool):
    trainable = adapter_tensors(adapters) if adapters else []
    names = [f"{site}.{m}" for site in sorted(adapters or {}) for m in ("a", "b")]
    if train_base:
        names += sorted(params)
        trainable += [params[k] for k in sorted(params)]
    leaves = [t.detach().requires_grad_(True) for t in trainable]
    # rebuild the containers around the fresh leaves
    n_ad = len(adapter_tensors(adapters)) if adapters else 0
    ad_copy = None
    if adapters:
        ad_copy = {}
        for i, site in enumerate(sorted(adapters)):
            src = adapters[site]
            ad_copy[site] = LoraAdapter(leaves[2 * i], leaves[2 * i + 1], src.alpha, site)
    p_copy = dict(params)
    if train_base:
        for k, leaf in zip(sorted(params), leaves[n_ad:]):
            p_copy[k] = leaf
    else:
        p_copy = {k: v.detach() for k, v in params.items()}
    loss = loss_fn(p_copy, ad_copy)
    grads = torch.autograd.grad(loss, leaves, allow_unused=True) if leaves else []
    out = {}
    for name, leaf, g in zip(names, leaves, grads):
        out[name] = np.zeros(tuple(leaf.shape)) if g is None else g.numpy().copy()
    return float(loss.detach()), out


def lm_cross_entropy(params: Params, cfg: BackboneConfig, adapters: AdapterSet | None, seq, target_labels,
                     train_base: bool = False):
    """Mean next-token cross entropy and its gradients.

    Gradients are returned as ``{name: ndarray}`` for the adapter tensors
    (``"{site}.a"``, ``"{site}.b"``) and, if ``train_base``, the base params.
    With a frozen base only adapters receive gradients.
    """
    return _loss_and_grads(lambda p, a: lm_loss(p, cfg, a, seq, target_labels), params, adapters, train_base)


def mlm_loss(params: Params, cfg: BackboneConfig, adapters: AdapterSet | None, masked_seq, mask_labels,
             train_base: bool = False):
    """Cross entropy over masked positions only, with gradients (see lm_cross_entropy)."""
    return _loss_and_grads(lambda p, a: masked_lm_loss(p, cfg, a, masked_seq, mask_labels),
                           params, adapters, train_base)


def mask_tokens(seq, p_percent: float, rng: np.random.Generator, mask_token_id: int = MASK_ID,
                force_one: bool = True):
    """Replace each position with ``mask_token_id`` with probability p/100.

    Returns ``(masked, labels)`` where ``labels`` holds the original id at
    masked positions and IGNORE_INDEX elsewhere. Works on a single sequence
    or a 2-D batch (masking is per row). With ``force_one`` a row whose draw
    selected nothing gets one uniformly chosen position masked.
    """
    if not 0.0 <= p_percent <= 100.0:
        raise ValueError("p_percent must lie in [0, 100]")
    arr = np.asarray(seq, dtype=np.int64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    sel = rng.random(arr.shape) < p_percent / 100.0
    if force_one:
        empty = ~sel.any(axis=1)
        if empty.any():
            pos = rng.integers(0, arr.shape[1], size=int(empty.sum()))
            sel[np.flatnonzero(empty), pos] = True
    masked = np.where(sel, mask_token_id, arr)
    labels = np.where(sel, arr, IGNORE_INDEX)
    if single:
        return masked[0], labels[0]
    return masked, labels


def params_to_records(params: Params, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().numpy() for k, v in params.items()}


def params_from_records(records: dict[str, np.ndarray], prefix: str = "") -> Params:
    return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in records.items() if k.startswith(prefix)}


def save_params(path, params: Params, cfg: BackboneConfig) -> None:
    """Write an ``o3-params-v1`` checkpoint."""
    from .store import PARAMS_FORMAT, dump_container

    dump_container(path, PARAMS_FORMAT, params_to_records(params), {"config": cfg.to_dict()})


def load_params(path) -> tuple[Params, BackboneConfig]:
    from .store import PARAMS_FORMAT, load_container

    records, meta = load_container(path, PARAMS_FORMAT)
    return params_from_records(records), BackboneConfig(**meta["config"])
