"""Reference causal attention, masked attention and the tile-skipping blocksparse path."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from phi3lab.sparsity import HeadAssignment, SparsePattern, block_mask, num_blocks_for, token_mask


@dataclass(frozen=True, eq=False)
class AttnTensors:
    """Q is ``[heads, seq, head_dim]``; K and V are ``[kv_heads, seq, head_dim]``."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        if self.Q.ndim != 3 or self.K.ndim != 3 or self.V.ndim != 3:
            raise ValueError("Q, K, V must be rank-3 [heads, seq, head_dim]")
        if self.K.shape != self.V.shape:
            raise ValueError(f"K shape {self.K.shape} != V shape {self.V.shape}")
        h, s, d = self.Q.shape
        hk, sk, dk = self.K.shape
        if (s, d) != (sk, dk):
            raise ValueError(f"Q {self.Q.shape} and K {self.K.shape} disagree on seq/head_dim")
        if h % hk != 0:
            raise ValueError(f"heads mod kv_heads != 0 ({h}, {hk})")
        for name in ("Q", "K", "V"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains NaN or Inf")

    @property
    def heads(self) -> int:
        return self.Q.shape[0]

    @property
    def kv_heads(self) -> int:
        return self.K.shape[0]

    @property
    def seq(self) -> int:
        return self.Q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.Q.shape[2]

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)

    def astype(self, dtype) -> AttnTensors:
        return AttnTensors(self.Q.astype(dtype), self.K.astype(dtype), self.V.astype(dtype))

    def kv_for_heads(self) -> tuple[np.ndarray, np.ndarray]:
        """K and V repeated so that index ``h`` holds the kv head of query head ``h``."""
        g = self.heads // self.kv_heads
        return np.repeat(self.K, g, axis=0), np.repeat(self.V, g, axis=0)

    @classmethod
    def random(cls, seed: int, heads: int, kv_heads: int, seq: int, head_dim: int, dtype=np.float32) -> AttnTensors:
        rng = np.random.default_rng(seed)
        q = rng.standard_normal((heads, seq, head_dim))
        k = rng.standard_normal((kv_heads, seq, head_dim))
        v = rng.standard_normal((kv_heads, seq, head_dim))
        return cls(q.astype(dtype), k.astype(dtype), v.astype(dtype))


def gqa_map(h: int, num_heads: int, num_kv_heads: int) -> int:
    if num_kv_heads < 1 or num_heads % num_kv_heads != 0:
        raise ValueError(f"H mod H_kv != 0 (H={num_heads}, H_kv={num_kv_heads})")
    if not 0 <= h < num_heads:
        raise ValueError(f"head index {h} out of range [0, {num_heads})")
    return h // (num_heads // num_kv_heads)


def _softmax_rows(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=-1, keepdims=True)


def attention_weights(t: AttnTensors, mask: np.ndarray) -> np.ndarray:
    """Softmax weights ``[heads, seq, seq]`` restricted to ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (t.heads, t.seq, t.seq))
    if mask.shape != (t.heads, t.seq, t.seq):
        raise ValueError(f"mask shape {mask.shape} does not match ({t.heads}, {t.seq}, {t.seq})")
    if not mask.any(axis=-1).all():
        raise ValueError("mask has a row with no allowed key")
    if (mask & ~np.tri(t.seq, dtype=bool)).any():
        raise ValueError("mask is not causal")
    k, _ = t.kv_for_heads()
    scores = np.einsum("hid,hjd->hij", t.Q, k) * t.Q.dtype.type(t.scale)
    return _softmax_rows(scores, mask)


def masked_attention(t: AttnTensors, mask: np.ndarray) -> np.ndarray:
    """Softmax attention over the allowed keys only. ``mask`` is ``[seq, seq]``
    (shared) or ``[heads, seq, seq]``."""
    _, v = t.kv_for_heads()
    return np.einsum("hij,hjd->hid", attention_weights(t, mask), v)


def dense_causal_attention(t: AttnTensors) -> np.ndarray:
    return masked_attention(t, np.tri(t.seq, dtype=bool))


@dataclass
class TileCounter:
    """Work done by :func:`blocksparse_attention`, in (head, query block, key block) tiles."""

    computed: int = 0
    dense: int = 0
    per_head: list[int] = field(default_factory=list)

    @property
    def fraction(self) -> float:
        return self.computed / self.dense if self.dense else 0.0


def head_token_masks(assignment: HeadAssignment, p: SparsePattern, seq: int) -> np.ndarray:
    """Token-level mask of every query head, ``[heads, seq, seq]``."""
    nb = num_blocks_for(seq, p.block_size)
    per_offset = {
        off: token_mask(block_mask(p.with_offset(off), nb), seq, p.block_size)
        for off in set(assignment.offsets)
    }
    return np.stack([per_offset[off] for off in assignment.offsets])


def blocksparse_attention(
    t: AttnTensors,
    assignment: HeadAssignment,
    p: SparsePattern,
    counter: TileCounter | None = None,
) -> np.ndarray:
    """Attention that visits only the allowed (query block, key block) tiles.

    Each query block streams over its allowed key tiles with a running max and
    running normaliser, so skipped tiles cost nothing. Query heads that share a
    kv head also share a pattern and are processed together.
    """
    if assignment.num_heads != t.heads or assignment.num_kv_heads != t.kv_heads:
        raise ValueError(
            f"assignment is for {assignment.num_heads}/{assignment.num_kv_heads} heads, "
            f"tensors have {t.heads}/{t.kv_heads}"
        )
    if assignment.stride != p.vertical_stride:
        raise ValueError("assignment stride does not match pattern stride")
    B = p.block_size
    nb = num_blocks_for(t.seq, B)
    g = t.heads // t.kv_heads
    scale = t.Q.dtype.type(t.scale)
    out = np.zeros_like(t.Q)
    tiles = [0] * t.heads

    for kvh in range(t.kv_heads):
        heads = slice(kvh * g, (kvh + 1) * g)
        mask = block_mask(p.with_offset(assignment.offsets[kvh * g]), nb)
        for qb in range(nb):
            q0, q1 = qb * B, min((qb + 1) * B, t.seq)
            q = t.Q[heads, q0:q1]                                  # [g, bq, d]
            run_max = np.full((g, q1 - q0, 1), -np.inf, dtype=t.Q.dtype)
            run_sum = np.zeros((g, q1 - q0, 1), dtype=t.Q.dtype)
            acc = np.zeros_like(q)
            for kb in mask.row(qb):
                k0, k1 = kb * B, min((kb + 1) * B, t.seq)
                s = np.einsum("gid,jd->gij", q, t.K[kvh, k0:k1]) * scale
                if kb == qb:
                    s = np.where(np.tri(q1 - q0, k1 - k0, dtype=bool), s, -np.inf)
                new_max = np.maximum(run_max, s.max(axis=-1, keepdims=True))
                corr = np.exp(run_max - new_max)
                w = np.exp(s - new_max)
                run_sum = run_sum * corr + w.sum(axis=-1, keepdims=True)
                acc = acc * corr + np.einsum("gij,jd->gid", w, t.V[kvh, k0:k1])
                run_max = new_max
            out[heads, q0:q1] = acc / run_sum
            for h in range(heads.start, heads.stop):
                tiles[h] += len(mask.row(qb))

    if counter is not None:
        counter.computed += sum(tiles)
        counter.dense += t.heads * nb * (nb + 1) // 2
        counter.per_head = tiles
    return out


# ---------------------------------------------------------------- rotary embedding


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta_base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError(f"head_dim must be even, got {self.head_dim}")
        if self.theta_base <= 0:
            raise ValueError("theta_base must be positive")


def rope_apply(x: np.ndarray, positions, rp: RopeParams) -> np.ndarray:
    """Rotate each (2i, 2i+1) pair of ``x[seq, head_dim]`` by ``pos * base**(-2i/head_dim)``."""
    x = np.asarray(x)
    if x.shape[-1] != rp.head_dim:
        raise ValueError(f"last dim {x.shape[-1]} != head_dim {rp.head_dim}")
    pos = np.asarray(positions)
    if (pos < 0).any():
        raise ValueError("positions must be nonnegative")
    inv_freq = rp.theta_base ** (-np.arange(0, rp.head_dim, 2, dtype=np.float64) / rp.head_dim)
    angle = pos.astype(np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angle).astype(x.dtype), np.sin(angle).astype(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


# ---------------------------------------------------------------- layer schedule


class LayerKind(enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"


@dataclass(frozen=True)
class LayerSchedule:
    kinds: tuple[LayerKind, ...]

    def counts(self) -> tuple[int, int]:
        dense = sum(k is LayerKind.DENSE for k in self.kinds)
        return dense, len(self.kinds) - dense


def layer_schedule(num_layers: int) -> LayerSchedule:
    """Dense and blocksparse layers alternate, starting with dense."""
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    return LayerSchedule(tuple(LayerKind.DENSE if i % 2 == 0 else LayerKind.SPARSE for i in range(num_layers)))
