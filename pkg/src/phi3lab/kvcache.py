"""Decode-time KV-cache retention under a blocksparse pattern, and paged footprints.

Retention is tracked per kv head. Query heads that share a kv head share its
offset, so a block can be dropped from that kv head's cache as soon as no
future query of the group can reach it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from phi3lab.attention import AttnTensors
from phi3lab.sparsity import HeadAssignment, SparsePattern

DEFAULT_PAGE_SIZE = 16


@dataclass(frozen=True)
class RetentionReport:
    per_head_retained_blocks: list[frozenset[int]]
    retained_tokens: int
    dense_tokens: int
    evictions: int = 0

    def __post_init__(self):
        if not 0 <= self.retained_tokens <= self.dense_tokens:
            raise ValueError("retained_tokens must lie in [0, dense_tokens]")

    @property
    def savings(self) -> float:
        return 1.0 - self.retained_tokens / self.dense_tokens if self.dense_tokens else 0.0


@dataclass(frozen=True)
class PagedLayout:
    page_size: int
    pages_per_kv_head: int
    total_pages: int
    total_bytes: int


def retained_blocks(p: SparsePattern, current_block: int) -> frozenset[int]:
    """Blocks that the current or any later query block can still attend."""
    if current_block < 0:
        raise ValueError(f"current_block must be >= 0, got {current_block}")
    vertical = range(p.head_offset, current_block + 1, p.vertical_stride)
    local = range(max(0, current_block - p.local_blocks + 1), current_block + 1)
    return frozenset(vertical) | frozenset(local)


def kv_savings(p: SparsePattern, num_blocks: int) -> float:
    if num_blocks < 1:
        raise ValueError(f"num_blocks must be >= 1, got {num_blocks}")
    return 1.0 - len(retained_blocks(p, num_blocks - 1)) / num_blocks


def paged_footprint(
    retained_tokens_per_kv_head: int,
    page_size: int,
    kv_heads: int,
    head_dim: int,
    bytes_per_scalar: int,
) -> PagedLayout:
    if retained_tokens_per_kv_head < 0:
        raise ValueError("retained token count must be nonnegative")
    if min(page_size, kv_heads, head_dim, bytes_per_scalar) < 1:
        raise ValueError("page_size, kv_heads, head_dim and bytes_per_scalar must be positive")
    pages = -(-retained_tokens_per_kv_head // page_size)
    total_pages = pages * kv_heads
    # K and V each occupy a page
    total_bytes = total_pages * page_size * head_dim * 2 * bytes_per_scalar
    return PagedLayout(page_size, pages, total_pages, total_bytes)


class BlockKVCache:
    """Block-granular KV cache of a single kv head."""

    def __init__(self, pattern: SparsePattern):
        self.pattern = pattern
        self.blocks: dict[int, tuple[list[np.ndarray], list[np.ndarray]]] = {}
        self.evicted: set[int] = set()
        self._pos = 0

    def append(self, k: np.ndarray, v: np.ndarray) -> int:
        """Store one token and evict what the pattern no longer needs. Returns the token's block."""
        blk = self._pos // self.pattern.block_size
        ks, vs = self.blocks.setdefault(blk, ([], []))
        ks.append(k)
        vs.append(v)
        self._pos += 1
        keep = retained_blocks(self.pattern, blk)
        for b in [b for b in self.blocks if b not in keep]:
            del self.blocks[b]
            self.evicted.add(b)
        return blk

    def keys_values(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cached keys, values and their absolute token positions, in position order."""
        B = self.pattern.block_size
        ks, vs, pos = [], [], []
        for b in sorted(self.blocks):
            bk, bv = self.blocks[b]
            ks.extend(bk)
            vs.extend(bv)
            pos.extend(range(b * B, b * B + len(bk)))
        return np.stack(ks), np.stack(vs), np.asarray(pos)

    @property
    def tokens(self) -> int:
        return sum(len(k) for k, _ in self.blocks.values())


def simulate_decode(
    p: SparsePattern,
    assignment: HeadAssignment,
    t: AttnTensors,
    block_size: int | None = None,
) -> tuple[np.ndarray, RetentionReport]:
    """Token-by-token decode against per-kv-head caches that evict unreachable blocks.

    Returns the per-step outputs stacked as ``[heads, seq, head_dim]`` (row ``i``
    is the output of decode step ``i``) and the retention state after the last step.
    """
    if block_size is not None and block_size != p.block_size:
        p = SparsePattern(block_size, p.local_blocks, p.vertical_stride, p.head_offset)
    if assignment.num_heads != t.heads or assignment.num_kv_heads != t.kv_heads:
        raise ValueError("assignment does not match tensor head counts")
    g = t.heads // t.kv_heads
    caches = [
        BlockKVCache(p.with_offset(assignment.offsets[kvh * g]))
        for kvh in range(t.kv_heads)
    ]
    scale = t.Q.dtype.type(t.scale)
    out = np.zeros_like(t.Q)
    for i in range(t.seq):
        for kvh, cache in enumerate(caches):
            cache.append(t.K[kvh, i], t.V[kvh, i])
            keys, values, _ = cache.keys_values()
            q = t.Q[kvh * g:(kvh + 1) * g, i]                      # [g, d]
            s = q @ keys.T * scale
            s = s - s.max(axis=-1, keepdims=True)
            w = np.exp(s)
            w /= w.sum(axis=-1, keepdims=True)
            out[kvh * g:(kvh + 1) * g, i] = w @ values

    report = RetentionReport(
        per_head_retained_blocks=[frozenset(c.blocks) for c in caches],
        retained_tokens=sum(c.tokens for c in caches),
        dense_tokens=t.seq * t.kv_heads,
        evictions=sum(len(c.evicted) for c in caches),
    )
    return out, report


def retention_table(p: SparsePattern, assignment: HeadAssignment, num_blocks: int) -> list[dict]:
    """Per-kv-head retention at the last of ``num_blocks`` full blocks."""
    rows = []
    for kvh, off in enumerate(assignment.kv_offsets()):
        kept = retained_blocks(p.with_offset(off), num_blocks - 1)
        rows.append(
            {
                "head": kvh,
                "offset": off,
                "retained_blocks": len(kept),
                "retained_tokens": len(kept) * p.block_size,
                "savings": 1.0 - len(kept) / num_blocks,
            }
        )
    return rows

