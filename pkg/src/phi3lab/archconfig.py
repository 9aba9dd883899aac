"""Model configurations, closed-form parameter counting and the chat template.

Parameter count of a dense decoder (biases absent, norms counted)::

    total = (2 - tied) * V * d                      # embedding + output head
          + L * (d*d + 2*d*(d*H_kv/H) + d*d)        # Q, K, V, O projections
          + L * 3 * d * f                           # GEGLU FFN: gate, up, down
          + L * 2 * d + d                           # two norms per layer + final norm

For a mixture-of-experts model the FFN term becomes ``E * 3 * d * f_e`` per
layer plus a router of ``E * d`` per layer; the active count uses ``top_k``
experts instead of ``E``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

USER = "<|user|>"
ASSISTANT = "<|assistant|>"
END = "<|end|>"
RESERVED_MARKERS = (USER, ASSISTANT, END)

_BUNDLED = ("phi-3-mini.json", "phi-3-small.json", "phi-3-medium.json", "phi-3.5-moe.json")
_MOE_FIELDS = ("num_experts", "top_k", "expert_ffn_dim")


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


class ChatFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    name: str
    hidden_dim: int
    num_layers: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    context_len: int
    tied_embeddings: bool = False

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("name", "tied_embeddings"):
                continue
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
            # zero layers is the degenerate embedding-only model
            low = 0 if f.name == "num_layers" else 1
            if value < low:
                raise ConfigError(f"{f.name} must be > 0, got {value}")
        if self.num_heads % self.num_kv_heads != 0:
            raise ConfigError(
                f"H mod H_kv != 0 (num_heads={self.num_heads}, num_kv_heads={self.num_kv_heads})"
            )
        if self.head_dim * self.num_heads != self.hidden_dim:
            raise ConfigError(
                f"head_dim * H != d ({self.head_dim} * {self.num_heads} != {self.hidden_dim})"
            )

    @property
    def group_size(self) -> int:
        """Query heads sharing one key/value head."""
        return self.num_heads // self.num_kv_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.num_kv_heads


@dataclass(frozen=True)
class MoEConfig:
    base: ModelConfig
    num_experts: int
    top_k: int
    expert_ffn_dim: int

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be > 0, got {self.num_experts}")
        if self.expert_ffn_dim < 1:
            raise ConfigError(f"expert_ffn_dim must be > 0, got {self.expert_ffn_dim}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"1 <= top_k <= E violated (top_k={self.top_k}, E={self.num_experts})")

    @property
    def name(self) -> str:
        return self.base.name


@dataclass(frozen=True)
class ParamCount:
    total: int
    active: int

    def __post_init__(self):
        if not 0 < self.active <= self.total:
            raise ConfigError(f"0 < active <= total violated ({self.active}, {self.total})")


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("user", "assistant"):
            raise ChatFormatError(f"unknown role {self.role!r}")
        for marker in RESERVED_MARKERS:
            if marker in self.content:
                raise ChatFormatError(f"reserved marker {marker} inside content")


def _non_ffn_params(cfg: ModelConfig) -> int:
    d, L = cfg.hidden_dim, cfg.num_layers
    embeddings = (1 if cfg.tied_embeddings else 2) * cfg.vocab_size * d
    attention = L * (2 * d * d + 2 * d * cfg.kv_dim)
    norms = L * 2 * d + d
    return embeddings + attention + norms


def param_count(cfg: ModelConfig) -> ParamCount:
    n = _non_ffn_params(cfg) + cfg.num_layers * 3 * cfg.hidden_dim * cfg.ffn_dim
    return ParamCount(total=n, active=n)


def moe_param_count(cfg: MoEConfig) -> ParamCount:
    base = cfg.base
    d, L = base.hidden_dim, base.num_layers
    shared = _non_ffn_params(base) + L * cfg.num_experts * d
    per_expert = 3 * d * cfg.expert_ffn_dim
    return ParamCount(
        total=shared + L * cfg.num_experts * per_expert,
        active=shared + L * cfg.top_k * per_expert,
    )


def count_params(cfg: ModelConfig | MoEConfig) -> ParamCount:
    if isinstance(cfg, MoEConfig):
        return moe_param_count(cfg)
    return param_count(cfg)


def solve_expert_ffn_dim(
    base: ModelConfig,
    num_experts: int,
    top_k: int,
    total_target: float,
    active_target: float,
    multiple: int = 64,
    search_max: int = 65536,
) -> int:
    """Expert width (a multiple of ``multiple``) minimising the worse relative miss
    against the total and active parameter budgets."""
    best, best_err = None, float("inf")
    for fe in range(multiple, search_max + 1, multiple):
        pc = moe_param_count(MoEConfig(base, num_experts, top_k, fe))
        err = max(abs(pc.total / total_target - 1), abs(pc.active / active_target - 1))
        if err < best_err:
            best, best_err = fe, err
    return best


# ---------------------------------------------------------------- chat template


def chat_format(turns: list[ChatTurn]) -> str:
    if not turns:
        raise ChatFormatError("empty conversation")
    parts = []
    for i, turn in enumerate(turns):
        expected = "user" if i % 2 == 0 else "assistant"
        if turn.role != expected:
            raise ChatFormatError(f"turn {i} must be {expected}, got {turn.role}")
        # revalidate in case the turn was built around __post_init__
        for marker in RESERVED_MARKERS:
            if marker in turn.content:
                raise ChatFormatError(f"reserved marker {marker} inside content")
        tag = USER if turn.role == "user" else ASSISTANT
        parts.append(f"{tag}\n{turn.content}{END}\n")
    parts.append(ASSISTANT)
    return "".join(parts)


def parse_chat(text: str) -> list[ChatTurn]:
    """Inverse of :func:`chat_format`."""
    if not text.endswith(ASSISTANT):
        raise ChatFormatError("missing trailing generation cue")
    body = text[: -len(ASSISTANT)]
    turns = []
    pos = 0
    while pos < len(body):
        for tag, role in ((USER, "user"), (ASSISTANT, "assistant")):
            if body.startswith(tag + "\n", pos):
                break
        else:
            raise ChatFormatError(f"expected role tag at offset {pos}")
        start = pos + len(tag) + 1
        stop = body.find(END + "\n", start)
        if stop < 0:
            raise ChatFormatError(f"unterminated {role} turn at offset {pos}")
        turns.append(ChatTurn(role, body[start:stop]))
        pos = stop + len(END) + 1
    if not turns:
        raise ChatFormatError("empty conversation")
    return turns


# ---------------------------------------------------------------- config files


def bundled_config_names() -> tuple[str, ...]:
    return _BUNDLED


def _resolve(path: str | Path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    if p.name in _BUNDLED and len(p.parts) == 1:
        return Path(str(resources.files("phi3lab") / "data" / "configs" / p.name))
    raise FileNotFoundError(f"config not found: {path}")


def config_from_dict(raw: dict, source: str = "<dict>") -> ModelConfig | MoEConfig:
    known = {f.name for f in fields(ModelConfig)} | set(_MOE_FIELDS)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown field(s) {', '.join(unknown)}")
    required = [f.name for f in fields(ModelConfig)]
    missing = [k for k in required if k not in raw]
    if missing:
        raise ConfigError(f"{source}: missing field(s) {', '.join(missing)}")
    if not isinstance(raw["tied_embeddings"], bool):
        raise ConfigError(f"{source}: field tied_embeddings must be a boolean")
    try:
        base = ModelConfig(**{k: raw[k] for k in required})
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    moe_keys = [k for k in _MOE_FIELDS if k in raw]
    if not moe_keys:
        return base
    if len(moe_keys) != len(_MOE_FIELDS):
        missing = [k for k in _MOE_FIELDS if k not in raw]
        raise ConfigError(f"{source}: incomplete MoE fields, missing {', '.join(missing)}")
    for k in _MOE_FIELDS:
        if isinstance(raw[k], bool) or not isinstance(raw[k], int):
            raise ConfigError(f"{source}: field {k} must be an integer")
    try:
        return MoEConfig(base, raw["num_experts"], raw["top_k"], raw["expert_ffn_dim"])
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path) -> ModelConfig | MoEConfig:
    """Load and validate a JSON config. Bare bundled names such as
    ``"phi-3-mini.json"`` resolve to the packaged copies."""
    p = _resolve(path)
    text = p.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p.name}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p.name}: top level must be a JSON object")
    return config_from_dict(raw, p.name)


def config_to_dict(cfg: ModelConfig | MoEConfig) -> dict:
    if isinstance(cfg, MoEConfig):
        out = config_to_dict(cfg.base)
        out.update(num_experts=cfg.num_experts, top_k=cfg.top_k, expert_ffn_dim=cfg.expert_ffn_dim)
        return out
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
