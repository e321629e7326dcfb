"""Per-request unlearning: craft preference labels, then fit the shared LoRA
on cross entropy toward them plus ``lambda`` times the orthogonal penalty."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .backbone import BOS_ID, IGNORE_INDEX, PAD_ID, BackboneConfig, Params, lm_loss
from .lora import LoraStack, adapter_tensors, orth_penalty
from .numeric import make_rng

RANDOM_LABEL = "random-label"
REFUSAL = "refusal"


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    epochs: int = 20
    lambda_orth: float = 0.1
    seed: int = 0
    label_mode: str = RANDOM_LABEL
    orth_previous_only: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_orth < 0:
            raise ValueError("lambda_orth must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.label_mode not in (RANDOM_LABEL, REFUSAL):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")


@dataclass
class UnlearnRequest:
    request_index: int
    prompts: list[np.ndarray]
    answers: list[int]
    crafted: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.prompts) != len(self.answers):
            raise ValueError("prompts and answers must align")
        if self.crafted and len(self.crafted) != len(self.prompts):
            raise ValueError("crafted labels must align 1:1 with samples")


def craft_labels(answers: Sequence[int], mode: str, option_space, refusal_pool, rng: np.random.Generator):
    """Draw one preference target per sample.

    ``random-label`` picks uniformly among the options other than the true
    answer (``option_space`` is one shared option list or one list per
    sample). ``refusal`` picks uniformly from ``refusal_pool`` (each entry a
    token id sequence). Returns a list of token-id tuples.
    """
    out = []
    if mode == RANDOM_LABEL:
        shared = option_space is not None and len(option_space) > 0 and np.isscalar(option_space[0])
        for i, truth in enumerate(answers):
            opts = list(option_space) if shared else list(option_space[i])
            if len(opts) < 2:
                raise ValueError(f"sample {i}: random-label mode needs at least 2 options")
            wrong = [o for o in opts if o != truth]
            out.append((int(wrong[rng.integers(len(wrong))]),))
    elif mode == REFUSAL:
        if not refusal_pool:
            raise ValueError("refusal mode needs a non-empty refusal pool")
        for _ in answers:
            pick = refusal_pool[rng.integers(len(refusal_pool))]
            out.append(tuple(int(t) for t in np.atleast_1d(pick)))
    else:
        raise ValueError(f"unknown label mode {mode!r}")
    return out


def build_lm_batch(prompts, labels) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced inputs ``[BOS] prompt label[:-1]`` with targets only on the label.

    Rows of different label length are right-padded; padding is ignored.
    """
    rows, tgts = [], []
    width = max(1 + len(p) + len(y) - 1 for p, y in zip(prompts, labels))
    for p, y in zip(prompts, labels):
        p = [int(t) for t in p]
        y = [int(t) for t in y]
        ids = [BOS_ID] + p + y[:-1]
        tgt = [IGNORE_INDEX] * len(p) + y
        pad = width - len(ids)
        rows.append(ids + [PAD_ID] * pad)
        tgts.append(tgt + [IGNORE_INDEX] * pad)
    return torch.tensor(rows, dtype=torch.int64), torch.tensor(tgts, dtype=torch.int64)


def unlearn_request(params: Params, cfg: BackboneConfig, stack: LoraStack, request: UnlearnRequest,
                    tcfg: TrainConfig, log_every: int = 0):
    """Optimize the stack's current adapter on ``L_CE + lambda * L_orth``.

    ``stack.begin_request()`` must already have been called for this request.
    Runs ``epochs * ceil(N / batch)`` AdamW steps; the base params are never
    touched. Returns ``(stack, trace)`` with one dict per step.
    """
    n = len(request.prompts)
    if n == 0:
        raise ValueError("empty unlearning request")
    if not request.crafted:
        raise ValueError("request has no crafted labels")
    for t in params.values():
        t.requires_grad_(False)
    tensors = adapter_tensors(stack.current)
    for t in tensors:
        t.requires_grad_(True)
    opt = torch.optim.AdamW(tensors, lr=tcfg.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    rng = make_rng(tcfg.seed, "unlearn-order", request.request_index)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    trace = []
    step = 0
    for _ in range(tcfg.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * tcfg.batch_size:(s + 1) * tcfg.batch_size]
            ids, tgt = build_lm_batch([request.prompts[i] for i in idx], [request.crafted[i] for i in idx])
            opt.zero_grad(set_to_none=True)
            l_ce = lm_loss(params, cfg, stack.current, ids, tgt)
            l_orth = orth_penalty(stack.history_a, stack.current, tcfg.orth_previous_only)
            total = l_ce + tcfg.lambda_orth * l_orth
            total.backward()
            opt.step()
            trace.append({"step": step, "l_ce": float(l_ce.detach()), "l_orth": float(l_orth.detach()),
                          "l_total": float(total.detach())})
            step += 1
    for t in tensors:
        t.requires_grad_(False)
    return stack, trace


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "l_ce", "l_orth", "l_total"])
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
