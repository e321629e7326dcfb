"""Low-rank adapters, the weighted forward, orthogonal regularization and the
shared adapter stack carried across unlearning requests.

Shapes follow ``h' = W h + weight * (alpha / K) * A (B h)`` with ``W`` of shape
(U, V), ``A`` (U, K) and ``B`` (K, V).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_RANK = 8
DEFAULT_ALPHA = 16.0
A_INIT_STD = 0.02


@dataclass
class LoraAdapter:
    a: torch.Tensor
    b: torch.Tensor
    alpha: float = DEFAULT_ALPHA
    site: str = ""

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ValueError("adapter matrices must be 2-D")
        if self.a.shape[1] != self.b.shape[0]:
            raise ValueError(f"rank mismatch at {self.site!r}: A {tuple(self.a.shape)}, B {tuple(self.b.shape)}")
        if self.a.shape[1] < 1:
            raise ValueError("rank must be >= 1")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def clone(self) -> "LoraAdapter":
        return LoraAdapter(self.a.detach().clone(), self.b.detach().clone(), self.alpha, self.site)

    def delta(self) -> torch.Tensor:
        """Effective weight update ``(alpha / K) A B``."""
        return self.scale * (self.a @ self.b)


AdapterSet = dict[str, LoraAdapter]


def init_adapter_set(shapes: dict[str, tuple[int, int]], rng: np.random.Generator,
                     rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA) -> AdapterSet:
    """Fresh adapters for each ``site -> (U, V)``: A ~ N(0, 0.02^2), B = 0."""
    out = {}
    for site in sorted(shapes):
        u, v = shapes[site]
        a = torch.from_numpy(rng.normal(0.0, A_INIT_STD, size=(u, rank)))
        b = torch.zeros((rank, v), dtype=torch.float64)
        out[site] = LoraAdapter(a, b, float(alpha), site)
    return out


def clone_adapters(adapters: AdapterSet) -> AdapterSet:
    return {k: ad.clone() for k, ad in adapters.items()}


def adapter_tensors(adapters: AdapterSet) -> list[torch.Tensor]:
    """All A and B tensors in a fixed (sorted-site, A then B) order."""
    out = []
    for site in sorted(adapters):
        out.append(adapters[site].a)
        out.append(adapters[site].b)
    return out


def lora_forward(w, adapter: LoraAdapter, h, weight: float = 1.0):
    """Weighted LoRA output ``W h + weight * (alpha/K) * A (B h)`` for one vector."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    w = torch.as_tensor(w, dtype=torch.float64)
    h = torch.as_tensor(h, dtype=torch.float64)
    if w.shape != (adapter.a.shape[0], adapter.b.shape[1]) or h.shape != (w.shape[1],):
        raise ValueError(f"shape mismatch: W {tuple(w.shape)}, A {tuple(adapter.a.shape)}, "
                         f"B {tuple(adapter.b.shape)}, h {tuple(h.shape)}")
    base = w @ h
    if weight == 0.0:
        return base
    return base + (weight * adapter.scale) * (adapter.a @ (adapter.b @ h))


def apply_linear(x: torch.Tensor, w: torch.Tensor, adapter: LoraAdapter | None = None,
                 weight: float | torch.Tensor = 1.0) -> torch.Tensor:
    """Batched row-vector form used inside the transformer: ``x W^T + ...``.

    ``weight`` may be a scalar or a tensor broadcastable against the output
    (per-example gating uses shape (batch, 1, 1)). A zero scalar weight skips
    the adapter path entirely so the result is bit-identical to the base model.
    """
    out = x @ w.T
    if adapter is None:
        return out
    if isinstance(weight, (int, float)) and weight == 0.0:
        return out
    return out + weight * adapter.scale * ((x @ adapter.b.T) @ adapter.a.T)


def orth_loss(a_prev_list, a_cur):
    """Sum of ``||A_prev^T A_cur||_F^2`` over the history and its gradient in A_cur.

    Works on numpy arrays or tensors; returns ``(float, ndarray)``. The gradient
    is ``sum 2 A_prev A_prev^T A_cur``. An empty history gives zero.
    """
    cur = np.asarray(a_cur.detach() if isinstance(a_cur, torch.Tensor) else a_cur, dtype=np.float64)
    loss = 0.0
    grad = np.zeros_like(cur)
    for prev in a_prev_list:
        prev = np.asarray(prev.detach() if isinstance(prev, torch.Tensor) else prev, dtype=np.float64)
        if prev.shape != cur.shape:
            raise ValueError(f"A shape mismatch: {prev.shape} vs {cur.shape}")
        gram = prev.T @ cur
        loss += float(np.sum(gram * gram))
        grad += 2.0 * prev @ gram
    return loss, grad


def orth_penalty(history: dict[str, list[torch.Tensor]], current: AdapterSet,
                 previous_only: bool = False) -> torch.Tensor:
    """Differentiable orthogonal loss summed over every adapter site."""
    total = torch.zeros((), dtype=torch.float64)
    for site in sorted(current):
        snaps = history.get(site, [])
        if previous_only:
            snaps = snaps[-1:]
        a = current[site].a
        for prev in snaps:
            total = total + ((prev.T @ a) ** 2).sum()
    return total


@dataclass
class LoraStack:
    """The single unlearning adapter shared by all requests plus A snapshots.

    ``request_index`` is the request currently being (or last) trained; a
    fresh stack has index 0 and an empty history.
    """

    current: AdapterSet
    history_a: dict[str, list[torch.Tensor]] = field(default_factory=dict)
    request_index: int = 0

    def __post_init__(self):
        for site in self.current:
            self.history_a.setdefault(site, [])

    def begin_request(self) -> "LoraStack":
        """Advance to the next request, snapshotting A from the previous one.

        The current A/B stay in place as the warm start. Mutates and returns
        the stack.
        """
        if self.request_index >= 1:
            for site, ad in self.current.items():
                self.history_a[site].append(ad.a.detach().clone())
        self.request_index += 1
        return self

    def orth_value(self, previous_only: bool = False) -> float:
        with torch.no_grad():
            return float(orth_penalty(self.history_a, self.current, previous_only))

    def orth_to_previous(self) -> float:
        """``sum_sites ||(A^{t-1})^T A^t||^2`` against the latest snapshot only."""
        return self.orth_value(previous_only=True)
