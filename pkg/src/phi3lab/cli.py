"""Command-line entry point: ``phi3lab <subcommand> ...``.

Exit status is 0 on success, 1 on usage errors and 2 when inputs fail validation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from collections import Counter

import numpy as np

from phi3lab import archconfig, attention, kvcache, moe, quant, scaling, sparsity

DEFAULT_SEED = 42


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


class _TurnAction(argparse.Action):
    """Collects --user/--assistant values into one ordered list."""

    def __call__(self, parser, namespace, values, option_string=None):
        turns = list(getattr(namespace, self.dest, None) or [])
        turns.append((self.const, values))
        setattr(namespace, self.dest, turns)


def _default_seed() -> int:
    raw = os.environ.get("PHI3LAB_SEED")
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"PHI3LAB_SEED must be an integer, got {raw!r}") from None


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------- subcommands


def cmd_pattern(args, out) -> None:
    p = sparsity.SparsePattern(args.block_size, args.local_blocks, args.stride, args.offset)
    m = sparsity.block_mask(p, args.blocks)
    grid = sparsity.token_mask(m, args.blocks * args.block_size, args.block_size) if args.tokens else m.allowed
    if args.pgm:
        data = sparsity.to_pgm(grid)
        if args.pgm == "-":
            sys.stdout.flush()
            sys.stdout.buffer.write(data)
            return
        with open(args.pgm, "wb") as fh:
            fh.write(data)
    if args.json:
        payload = {
            "num_blocks": m.num_blocks,
            "level": "token" if args.tokens else "block",
            "density": sparsity.density(m),
            "allowed": sparsity.run_length_rows(grid),
        }
        out.write(json.dumps(payload, separators=(",", ":")) + "\n")
    elif not args.pgm:
        out.write(sparsity.render_ascii(p, args.blocks))


def cmd_forward(args, out) -> None:
    cfg = archconfig.load_config(args.config)
    base = cfg.base if isinstance(cfg, archconfig.MoEConfig) else cfg
    heads = args.heads or base.num_heads
    kv_heads = args.kv_heads or base.num_kv_heads
    head_dim = args.head_dim or base.head_dim
    dtype = np.float64 if args.oracle == "double" else np.float32
    t = attention.AttnTensors.random(args.seed, heads, kv_heads, args.seq, head_dim, dtype)
    p = sparsity.SparsePattern(args.block_size, args.local_blocks, args.stride)
    assignment = sparsity.assign_offsets(heads, kv_heads, args.stride)
    counter = attention.TileCounter()
    fast = attention.blocksparse_attention(t, assignment, p, counter)
    ref = attention.masked_attention(t, attention.head_token_masks(assignment, p, args.seq))
    nb = sparsity.num_blocks_for(args.seq, args.block_size)
    diffs = np.abs(fast - ref).max(axis=(1, 2))
    rows = [
        [h, attention.gqa_map(h, heads, kv_heads), assignment.offsets[h], f"{diffs[h]:.3e}",
         counter.per_head[h], nb * (nb + 1) // 2]
        for h in range(heads)
    ]
    rows.append(["total", "", "", f"{diffs.max():.3e}", counter.computed, counter.dense])
    out.write(_csv(rows, ["head", "kv_head", "offset", "max_abs_diff", "tiles_computed", "tiles_dense"]))


def cmd_kv_report(args, out) -> None:
    p = sparsity.SparsePattern(args.block_size, args.local_blocks, args.stride)
    assignment = sparsity.assign_offsets(args.kv_heads, args.kv_heads, args.stride)
    rows = []
    total_retained = total_pages = total_bytes = 0
    for r in kvcache.retention_table(p, assignment, args.blocks):
        layout = kvcache.paged_footprint(r["retained_tokens"], args.page_size, 1, args.head_dim, args.bytes_per_scalar)
        rows.append([r["head"], r["retained_blocks"], _fmt(r["savings"]), layout.total_pages, layout.total_bytes])
        total_retained += r["retained_blocks"]
        total_pages += layout.total_pages
        total_bytes += layout.total_bytes
    dense_blocks = args.blocks * args.kv_heads
    rows.append(["total", total_retained, _fmt(1 - total_retained / dense_blocks), total_pages, total_bytes])
    out.write(_csv(rows, ["head", "retained_blocks", "savings", "pages", "bytes"]))


def cmd_moe_route(args, out) -> None:
    rng = np.random.default_rng(args.seed)
    logits = rng.standard_normal((args.tokens, args.experts))
    decisions = [moe.route_top2(row, args.top_k) for row in logits]
    k = args.top_k
    header = ["token"] + [f"expert_{i + 1}" for i in range(k)] + [f"gate_{i + 1}" for i in range(k)]
    rows = [[n, *d.expert_indices, *(_fmt(g) for g in d.gates)] for n, d in enumerate(decisions)]
    out.write(_csv(rows, header))
    stats = moe.load_stats(decisions, args.experts)
    out.write("\n")
    hist = [[e, int(c)] for e, c in enumerate(stats.counts)]
    hist.append(["max_mean_ratio", _fmt(stats.max_mean_ratio)])
    out.write(_csv(hist, ["expert", "count"]))


def cmd_quantize(args, out) -> None:
    rng = np.random.default_rng(args.seed)
    w = rng.standard_normal(args.len)
    groups = quant.quantize_int4(w, args.group_size)
    rows = [[i, f"{g.scale:.9g}", " ".join(str(int(c)) for c in g.codes)] for i, g in enumerate(groups)]
    out.write(_csv(rows, ["group", "scale", "codes"]))
    out.write("\n")
    stats = quant.error_stats(w, groups)
    max_half_scale = max((g.scale / 2 for g in groups), default=0.0)
    stat_rows = [[k, f"{v:.9g}"] for k, v in stats.items()]
    stat_rows.append(["max_half_scale", f"{max_half_scale:.9g}"])
    out.write(_csv(stat_rows, ["statistic", "value"]))


def cmd_footprint(args, out) -> None:
    group = None if args.group_size == 0 else args.group_size
    r = quant.footprint(int(float(args.params)), args.bits, group, args.scale_bits)
    rows = [
        ["weight_bytes", r.weight_bytes],
        ["scale_bytes", r.scale_bytes],
        ["total_bytes", r.total_bytes],
        ["weight_gib", _fmt(r.weight_gib)],
        ["total_gib", _fmt(r.total_gib)],
    ]
    out.write(_csv(rows, ["field", "value"]))


def cmd_params(args, out) -> None:
    names = archconfig.bundled_config_names() if args.all else [args.config]
    rows = []
    for name in names:
        cfg = archconfig.load_config(name)
        pc = archconfig.count_params(cfg)
        rows.append([cfg.name, pc.total, pc.active])
    out.write(_csv(rows, ["name", "total", "active"]))


def cmd_chat(args, out) -> None:
    turns = [archconfig.ChatTurn(role, content) for role, content in (args.turns or [])]
    out.write(archconfig.chat_format(turns))


def cmd_scaling(args, out) -> None:
    entries = scaling.load_bench(args.bench)
    rows = [
        [e.model_name, e.param_count, f"{e.mmlu:g}", _fmt(pt.ln_size), _fmt(pt.ln_error)]
        for e, pt in zip(entries, scaling.scaling_points(entries))
    ]
    out.write(_csv(rows, ["model", "param_count", "mmlu", "ln_size", "ln_error"]))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phi3lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    seed = _default_seed()

    p = sub.add_parser("pattern", help="render a blocksparse mask")
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--block-size", type=int, default=sparsity.DEFAULT_BLOCK_SIZE)
    p.add_argument("--local-blocks", type=int, default=2)
    p.add_argument("--stride", type=int, default=3)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--tokens", action="store_true", help="expand to token level")
    p.add_argument("--pgm", metavar="PATH", help="write a binary PGM image ('-' for stdout)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_pattern)

    p = sub.add_parser("forward", help="blocksparse attention vs the masked oracle")
    p.add_argument("--config", default="phi-3-small.json")
    p.add_argument("--seq", type=int, default=64)
    p.add_argument("--block-size", type=int, default=8)
    p.add_argument("--local-blocks", type=int, default=2)
    p.add_argument("--stride", type=int, default=3)
    p.add_argument("--heads", type=int)
    p.add_argument("--kv-heads", type=int)
    p.add_argument("--head-dim", type=int)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--oracle", choices=("double", "single"), default="single")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("kv-report", help="KV-cache retention and paged footprint")
    p.add_argument("--stride", type=int, default=3)
    p.add_argument("--local-blocks", type=int, default=2)
    p.add_argument("--block-size", type=int, default=sparsity.DEFAULT_BLOCK_SIZE)
    p.add_argument("--blocks", type=int, default=96)
    p.add_argument("--page-size", type=int, default=kvcache.DEFAULT_PAGE_SIZE)
    p.add_argument("--kv-heads", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--bytes-per-scalar", type=int, default=2)
    p.set_defaults(func=cmd_kv_report)

    p = sub.add_parser("moe-route", help="route random tokens over experts")
    p.add_argument("--experts", type=int, default=16)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_moe_route)

    p = sub.add_parser("quantize", help="int4 round trip on a random vector")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--len", type=int, default=128)
    p.add_argument("--group-size", type=int, default=quant.DEFAULT_GROUP_SIZE)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("footprint", help="quantized weight memory")
    p.add_argument("--params", default="3.8e9")
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--group-size", type=int, default=quant.DEFAULT_GROUP_SIZE, help="0 = one group")
    p.add_argument("--scale-bits", type=int, default=quant.DEFAULT_SCALE_BITS)
    p.set_defaults(func=cmd_footprint)

    p = sub.add_parser("params", help="parameter counts of a config")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--all", action="store_true", help="every bundled config")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("chat", help="render the chat template")
    p.add_argument("--user", dest="turns", action=_TurnAction, const="user")
    p.add_argument("--assistant", dest="turns", action=_TurnAction, const="assistant")
    p.set_defaults(func=cmd_chat)

    p = sub.add_parser("scaling", help="log MMLU error vs log size")
    p.add_argument("--bench", help="bench JSON (defaults to the bundled table)")
    p.set_defaults(func=cmd_scaling)
    return parser


def dispatch(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "phi3lab: error: a subcommand is required")
        args.func(args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"phi3lab: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
