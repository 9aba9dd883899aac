"""Top-k expert routing over GEGLU experts (inference only)."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import erf


@dataclass(frozen=True)
class RoutingDecision:
    expert_indices: tuple[int, ...]
    gates: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class ExpertGLU:
    W_gate: np.ndarray   # [f_e, d]
    W_up: np.ndarray     # [f_e, d]
    W_down: np.ndarray   # [d, f_e]

    def __post_init__(self):
        if self.W_gate.ndim != 2 or self.W_gate.shape != self.W_up.shape:
            raise ValueError(f"W_gate {self.W_gate.shape} and W_up {self.W_up.shape} must match")
        f, d = self.W_gate.shape
        if self.W_down.shape != (d, f):
            raise ValueError(f"W_down must be {(d, f)}, got {self.W_down.shape}")
        for w in (self.W_gate, self.W_up, self.W_down):
            if not np.all(np.isfinite(w)):
                raise ValueError("expert weights must be finite")

    @property
    def hidden_dim(self) -> int:
        return self.W_gate.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, f: int) -> ExpertGLU:
        return cls(
            rng.standard_normal((f, d)) / np.sqrt(d),
            rng.standard_normal((f, d)) / np.sqrt(d),
            rng.standard_normal((d, f)) / np.sqrt(f),
        )


@dataclass(frozen=True)
class LoadStats:
    counts: np.ndarray
    max_mean_ratio: float


def gelu(x):
    """Exact (erf) GELU."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def route_top2(logits, top_k: int = 2) -> RoutingDecision:
    """Pick the ``top_k`` largest logits (lowest index wins ties) and softmax over them."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("logits must be a vector")
    if np.isnan(logits).any():
        raise ValueError("NaN in router logits")
    if not np.isfinite(logits).all():
        raise ValueError("router logits must be finite")
    if not 1 <= top_k <= logits.size:
        raise ValueError(f"need 1 <= top_k <= E, got top_k={top_k}, E={logits.size}")
    idx = np.argsort(-logits, kind="stable")[:top_k]
    sel = logits[idx]
    w = np.exp(sel - sel.max())
    w /= w.sum()
    return RoutingDecision(tuple(int(i) for i in idx), tuple(float(g) for g in w))


def expert_forward(x, e: ExpertGLU) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (e.hidden_dim,):
        raise ValueError(f"input shape {x.shape} does not match expert width d={e.hidden_dim}")
    return e.W_down @ (gelu(e.W_gate @ x) * (e.W_up @ x))


def moe_forward(
    x,
    router: np.ndarray,
    experts: list[ExpertGLU],
    top_k: int = 2,
    counter: Counter | None = None,
) -> np.ndarray:
    """Gate-weighted sum of the selected experts' outputs.

    Only the routed experts run; pass a ``Counter`` to record which ones did.
    """
    x = np.asarray(x, dtype=np.float64)
    router = np.asarray(router, dtype=np.float64)
    if router.shape != (len(experts), x.shape[0]):
        raise ValueError(f"router must be {(len(experts), x.shape[0])}, got {router.shape}")
    decision = route_top2(router @ x, top_k)
    y = np.zeros_like(x)
    for i, g in zip(decision.expert_indices, decision.gates):
        y += g * expert_forward(x, experts[i])
        if counter is not None:
            counter[i] += 1
    return y


def load_stats(decisions: list[RoutingDecision], num_experts: int) -> LoadStats:
    counts = np.zeros(num_experts, dtype=np.int64)
    for d in decisions:
        for i in d.expert_indices:
            counts[i] += 1
    mean = counts.mean()
    ratio = float(counts.max() / mean) if mean > 0 else 0.0
    return LoadStats(counts, ratio)
