"""Small shared builders for tests (tiny models, random adapters)."""

import numpy as np
import torch

from o3unlearn.backbone import BackboneConfig, init_params
from o3unlearn.lora import LoraAdapter, adapter_tensors


def tiny_config(causal=True, vocab=12, d_model=8, n_layers=2, n_heads=2, max_len=10):
    return BackboneConfig(vocab_size=vocab, d_model=d_model, n_layers=n_layers, n_heads=n_heads,
                          max_len=max_len, causal=causal)


def random_params(cfg, seed=0, scale=None):
    rng = np.random.default_rng(seed)
    p = init_params(cfg, rng)
    if scale:
        for k, v in p.items():
            if v.ndim == 2:
                p[k] = torch.from_numpy(rng.normal(0, scale, size=tuple(v.shape)))
    return p


def random_adapters(cfg, seed=1, rank=2, std=0.3):
    rng = np.random.default_rng(seed)
    out = {}
    for site, (u, v) in sorted(cfg.lora_shapes().items()):
        out[site] = LoraAdapter(torch.from_numpy(rng.normal(0, std, (u, rank))),
                                torch.from_numpy(rng.normal(0, std, (rank, v))), 4.0, site)
    return out


def flat_adapters(adapters):
    return np.concatenate([t.detach().numpy().ravel() for t in adapter_tensors(adapters)])


def set_flat(adapters, vec):
    i = 0
    for t in adapter_tensors(adapters):
        n = t.numel()
        with torch.no_grad():
            t.copy_(torch.from_numpy(vec[i:i + n].reshape(tuple(t.shape))))
        i += n


def grads_to_flat(adapters, grads):
    return np.concatenate([grads[f"{site}.{m}"].ravel() for site in sorted(adapters) for m in ("a", "b")])
