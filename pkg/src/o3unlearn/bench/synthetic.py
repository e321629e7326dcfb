"""Synthetic multi-domain question answering data.

Vocabulary layout (ids)::

    0..3            pad, mask, bos, unk
    4..4+K-1        option (answer) tokens
    next S ids      shared range, reachable from every domain
    then D blocks   exclusive range per domain

Every (domain, option) pair owns a Markov chain over the domain's exclusive
tokens plus the shared range. Each option has a slice of the exclusive range
that its chain favours, so the correct answer is recoverable from the
question. A question is a chain sample of fixed length and its answer is the
option token of the chain that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..backbone import N_RESERVED
from ..numeric import make_rng


@dataclass(frozen=True)
class SyntheticSpec:
    n_domains: int = 6
    n_options: int = 4
    tokens_per_domain: int = 8
    shared_tokens: int = 8
    seq_len: int = 12
    temperature: float = 3.0
    option_bias: float = 3.5
    shared_penalty: float = 1.5
    n_train: int = 200
    n_test: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_options < 2:
            raise ValueError("option count must be >= 2")
        if self.n_domains < 1:
            raise ValueError("need at least one domain")
        if self.tokens_per_domain < self.n_options:
            raise ValueError("each option needs at least one exclusive token")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def option_ids(self) -> list[int]:
        return list(range(N_RESERVED, N_RESERVED + self.n_options))

    @property
    def shared_range(self) -> range:
        start = N_RESERVED + self.n_options
        return range(start, start + self.shared_tokens)

    def domain_range(self, d: int) -> range:
        start = self.shared_range.stop + d * self.tokens_per_domain
        return range(start, start + self.tokens_per_domain)

    @property
    def vocab_size(self) -> int:
        return self.shared_range.stop + self.n_domains * self.tokens_per_domain


def check_ranges(ranges: list[range]) -> None:
    """Raise if any two exclusive ranges overlap."""
    seen: set[int] = set()
    for r in ranges:
        if seen & set(r):
            raise ValueError("overlapping exclusive token ranges")
        seen |= set(r)


@dataclass
class QASet:
    prompts: np.ndarray   # (N, seq_len) int64
    answers: np.ndarray   # (N,) option token ids
    domain: int

    def __len__(self) -> int:
        return self.prompts.shape[0]


def _chains(spec: SyntheticSpec, d: int, rng: np.random.Generator):
    allowed = np.array(list(spec.domain_range(d)) + list(spec.shared_range), dtype=np.int64)
    n_ex = spec.tokens_per_domain
    owned = np.array_split(np.arange(n_ex), spec.n_options)
    out = []
    for k in range(spec.n_options):
        logits = rng.normal(size=(allowed.size, allowed.size)) / spec.temperature
        logits[:, owned[k]] += spec.option_bias
        logits[:, n_ex:] -= spec.shared_penalty
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        out.append((allowed, owned[k], probs))
    return out


def _sample(chain, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    allowed, owned, probs = chain
    cum = np.cumsum(probs, axis=1)
    state = owned[rng.integers(owned.size, size=n)]
    seqs = np.empty((n, length), dtype=np.int64)
    for pos in range(length):
        seqs[:, pos] = allowed[state]
        u = rng.random(n)
        state = np.minimum((cum[state] < u[:, None]).sum(axis=1), allowed.size - 1)
    return seqs


def _domain_sets(spec: SyntheticSpec, d: int) -> tuple[QASet, QASet]:
    chains = _chains(spec, d, make_rng(spec.seed, "chains", d))
    rng = make_rng(spec.seed, "samples", d)
    sets = []
    for n in (spec.n_train, spec.n_test):
        labels = rng.integers(spec.n_options, size=n)
        prompts = np.empty((n, spec.seq_len), dtype=np.int64)
        for k in range(spec.n_options):
            rows = np.flatnonzero(labels == k)
            if rows.size:
                prompts[rows] = _sample(chains[k], rows.size, spec.seq_len, rng)
        answers = np.asarray(spec.option_ids)[labels]
        sets.append(QASet(prompts, answers, d))
    return sets[0], sets[1]


def gen_synthetic(spec: SyntheticSpec) -> dict[int, tuple[QASet, QASet]]:
    """``{domain: (train, test)}``, deterministic in ``spec``."""
    check_ranges([spec.domain_range(d) for d in range(spec.n_domains)] + [spec.shared_range])
    return {d: _domain_sets(spec, d) for d in range(spec.n_domains)}


def histogram_overlap(a: np.ndarray, b: np.ndarray, vocab_size: int) -> float:
    """Shared mass of two normalized token histograms (sum of elementwise minima)."""
    ha = np.bincount(np.ravel(a), minlength=vocab_size).astype(np.float64)
    hb = np.bincount(np.ravel(b), minlength=vocab_size).astype(np.float64)
    return float(np.minimum(ha / ha.sum(), hb / hb.sum()).sum())
