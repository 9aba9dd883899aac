"""Per-head blocksparse attention patterns.

A query block ``q`` may attend key block ``k`` iff ``k <= q`` and either the key
block is one of the ``local_blocks`` most recent blocks (``q - k < Lb``) or it lies
on one of the head's vertical columns (``k % stride == offset``). Blocks are
0-indexed. Vertical columns are anchored at block 0, so the set of columns a head
keeps does not move as decoding advances.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_BLOCK_SIZE = 64


@dataclass(frozen=True)
class SparsePattern:
    block_size: int = DEFAULT_BLOCK_SIZE
    local_blocks: int = 2
    vertical_stride: int = 3
    head_offset: int = 0

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.local_blocks < 1:
            raise ValueError(f"local_blocks must be >= 1, got {self.local_blocks}")
        if self.vertical_stride < 1:
            raise ValueError(f"vertical_stride must be >= 1, got {self.vertical_stride}")
        if not 0 <= self.head_offset < self.vertical_stride:
            raise ValueError(
                f"head_offset must lie in [0, {self.vertical_stride}), got {self.head_offset}"
            )

    def with_offset(self, offset: int) -> SparsePattern:
        return replace(self, head_offset=offset)

    def is_local(self, q: int, k: int) -> bool:
        return 0 <= q - k < self.local_blocks

    def is_vertical(self, k: int) -> bool:
        return k % self.vertical_stride == self.head_offset

    def allows(self, q: int, k: int) -> bool:
        return k <= q and (q - k < self.local_blocks or k % self.vertical_stride == self.head_offset)


@dataclass(frozen=True, eq=False)
class BlockMask:
    num_blocks: int
    allowed: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, BlockMask):
            return NotImplemented
        return self.num_blocks == other.num_blocks and np.array_equal(self.allowed, other.allowed)

    def row(self, q: int) -> list[int]:
        return np.flatnonzero(self.allowed[q]).tolist()

    @property
    def allowed_count(self) -> int:
        return int(self.allowed.sum())


@dataclass(frozen=True)
class HeadAssignment:
    """Vertical-column offset of every query head; query heads sharing a kv head share an offset."""

    offsets: tuple[int, ...]
    num_kv_heads: int
    stride: int

    @property
    def num_heads(self) -> int:
        return len(self.offsets)

    @property
    def group_size(self) -> int:
        return self.num_heads // self.num_kv_heads

    def kv_offsets(self) -> tuple[int, ...]:
        return self.offsets[:: self.group_size]

    def pattern_for_head(self, template: SparsePattern, h: int) -> SparsePattern:
        return template.with_offset(self.offsets[h])


@dataclass(frozen=True)
class CoverageReport:
    covered: bool
    uncovered: list[tuple[int, int]]


def block_mask(p: SparsePattern, num_blocks: int) -> BlockMask:
    if num_blocks < 1:
        raise ValueError(f"num_blocks must be >= 1, got {num_blocks}")
    q = np.arange(num_blocks)[:, None]
    k = np.arange(num_blocks)[None, :]
    allowed = (k <= q) & ((q - k < p.local_blocks) | (k % p.vertical_stride == p.head_offset))
    allowed.setflags(write=False)
    return BlockMask(num_blocks, allowed)


def num_blocks_for(seq_len: int, block_size: int) -> int:
    return -(-seq_len // block_size)


def token_mask(m: BlockMask, seq_len: int, block_size: int) -> np.ndarray:
    """Expand a block mask to tokens, with causality inside each block."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    if seq_len > m.num_blocks * block_size:
        raise ValueError(
            f"seq_len {seq_len} exceeds mask capacity {m.num_blocks} blocks x {block_size}"
        )
    blk = np.arange(seq_len) // block_size
    causal = np.tri(seq_len, dtype=bool)
    return causal & m.allowed[np.ix_(blk, blk)]


def assign_offsets(num_heads: int, num_kv_heads: int, stride: int) -> HeadAssignment:
    if num_kv_heads < 1 or num_heads % num_kv_heads != 0:
        raise ValueError(f"H mod H_kv != 0 (H={num_heads}, H_kv={num_kv_heads})")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    group = num_heads // num_kv_heads
    offsets = tuple((h // group) % stride for h in range(num_heads))
    return HeadAssignment(offsets, num_kv_heads, stride)


def coverage_check(assignment: HeadAssignment, p_template: SparsePattern, num_blocks: int) -> CoverageReport:
    """Causal block pairs that no head attends."""
    if assignment.stride != p_template.vertical_stride:
        raise ValueError(
            f"assignment stride {assignment.stride} != pattern stride {p_template.vertical_stride}"
        )
    union = np.zeros((num_blocks, num_blocks), dtype=bool)
    for off in sorted(set(assignment.offsets)):
        union |= block_mask(p_template.with_offset(off), num_blocks).allowed
    causal = np.tri(num_blocks, dtype=bool)
    qs, ks = np.nonzero(causal & ~union)
    uncovered = [(int(q), int(k)) for q, k in zip(qs, ks)]
    return CoverageReport(not uncovered, uncovered)


def density(m: BlockMask) -> float:
    n = m.num_blocks
    return m.allowed_count / (n * (n + 1) // 2)


def render_ascii(p: SparsePattern, num_blocks: int) -> str:
    """One line per query block: 'L' local, 'V' vertical, '.' skipped, ' ' acausal.

    A block that is both local and vertical is drawn as 'L'.
    """
    lines = []
    for q in range(num_blocks):
        row = []
        for k in range(num_blocks):
            if k > q:
                row.append(" ")
            elif p.is_local(q, k):
                row.append("L")
            elif p.is_vertical(k):
                row.append("V")
            else:
                row.append(".")
        lines.append("".join(row).rstrip())
    return "\n".join(lines) + "\n"


def to_pgm(mask: np.ndarray) -> bytes:
    """Binary greymap (P5): allowed cells white, the rest black."""
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    return header + np.where(mask, 255, 0).astype(np.uint8).tobytes()


def run_length_rows(mask: np.ndarray) -> list[list[list[int]]]:
    """Each row as ``[[value, count], ...]`` with value 0/1."""
    out = []
    for row in np.asarray(mask, dtype=bool):
        runs: list[list[int]] = []
        for v in row.astype(int).tolist():
            if runs and runs[-1][0] == v:
                runs[-1][1] += 1
            else:
                runs.append([v, 1])
        out.append(runs)
    return out
