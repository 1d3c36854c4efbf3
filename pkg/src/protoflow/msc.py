"""Multi-stream condition encoder.

Three streams produce one fused token sequence for the generator:

* semantic stream: learnable queries appended to the prompt embedding are
  run through a frozen backbone; the trailing query states are projected
  into condition space,
* raw-text stream: the prompt embeddings themselves, projected,
* prototype stream: retrieved prototype features, projected.

All parameters live in float64 and are initialized from a seeded numpy
stream so that two constructions with the same config are bit-identical.
The backbone is frozen: its tensors are created with ``requires_grad``
off and never handed to an optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import EmptyPrompt, SeededRng, WidthMismatch, stable_hash64, tokenize

_F64 = torch.float64


@dataclass
class MscConfig:
    """Condition-encoder shape and seeding.

    Desk-scale defaults; the full-scale geometry (d_c=1152, n_q=64) is
    expressible through the same fields.
    """

    d_c: int = 64
    n_q: int = 8
    d_p: int = 8
    prompt_buckets: int = 1024
    max_prompt_tokens: int = 16
    backbone: str = "mini-transformer"
    backbone_layers: int = 2
    backbone_heads: int = 4
    projector_hidden: int = 0  # 0 means "same as d_c"
    null_rts_tokens: int = 4
    null_ps_tokens: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in ("mini-transformer", "identity"):
            raise ValueError(f"unknown backbone variant {self.backbone!r}")
        if self.d_c % self.backbone_heads != 0:
            raise ValueError("d_c must be divisible by backbone_heads")

    @property
    def hidden(self) -> int:
        return self.projector_hidden or self.d_c


def _tensor(rng: SeededRng, *shape: int, scale: float = 0.02) -> torch.Tensor:
    return torch.from_numpy(rng.normal(size=shape, scale=scale)).to(_F64)


def _init_linear(layer: nn.Linear, rng: SeededRng, scale: float = 0.02) -> nn.Linear:
    with torch.no_grad():
        layer.weight.copy_(_tensor(rng, *layer.weight.shape, scale=scale))
        if layer.bias is not None:
            layer.bias.zero_()
    return layer


def _linear(d_in: int, d_out: int, rng: SeededRng, scale: float = 0.02) -> nn.Linear:
    return _init_linear(nn.Linear(d_in, d_out, dtype=_F64), rng, scale)


class MultiHeadAttention(nn.Module):
    """Plain multi-head attention; optionally causal, optionally cross."""

    def __init__(self, d_model: int, heads: int, rng: SeededRng, d_kv: int | None = None,
                 causal: bool = False):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError("d_model must be divisible by heads")
        d_kv = d_kv if d_kv is not None else d_model
        self.heads = heads
        self.head_dim = d_model // heads
        self.causal = causal
        self.wq = _linear(d_model, d_model, rng)
        self.wk = _linear(d_kv, d_model, rng)
        self.wv = _linear(d_kv, d_model, rng)
        self.wo = _linear(d_model, d_model, rng)

    def forward(self, x: torch.Tensor, kv: torch.Tensor | None = None) -> torch.Tensor:
        if kv is None:
            kv = x
        b, s, _ = x.shape
        s_kv = kv.shape[1]
        q = self.wq(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        k = self.wk(kv).view(b, s_kv, self.heads, self.head_dim).transpose(1, 2)
        v = self.wv(kv).view(b, s_kv, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / self.head_dim**0.5
        if self.causal:
            mask = torch.triu(torch.ones(s, s_kv, dtype=torch.bool, device=x.device), 1)
            scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, s, -1)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, hidden: int, rng: SeededRng):
        super().__init__()
        self.fc1 = _linear(d_model, hidden, rng)
        self.fc2 = _linear(hidden, d_model, rng)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class FrozenBackbone(nn.Module):
    """Fixed-parameter stack the semantic stream reads through.

    ``mini-transformer`` is a small causal pre-LN transformer (queries are
    appended after the prompt, so causal attention lets them see every
    prompt position).  ``identity`` passes tokens through untouched, which
    isolates the tail-slice mechanics in tests.  Forward is a pure
    function of its input.
    """

    def __init__(self, cfg: MscConfig):
        super().__init__()
        self.variant = cfg.backbone
        self.blocks = nn.ModuleList()
        if self.variant == "mini-transformer":
            rng = SeededRng(cfg.seed).derive("backbone")
            for _ in range(cfg.backbone_layers):
                block = nn.ModuleDict({
                    "ln1": nn.LayerNorm(cfg.d_c, eps=1e-5, dtype=_F64),
                    "attn": MultiHeadAttention(cfg.d_c, cfg.backbone_heads, rng, causal=True),
                    "ln2": nn.LayerNorm(cfg.d_c, eps=1e-5, dtype=_F64),
                    "ffn": FeedForward(cfg.d_c, 2 * cfg.d_c, rng),
                })
                self.blocks.append(block)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (S, d_c) token sequence -> (S, d_c)."""
        if self.variant == "identity":
            return x
        h = x.unsqueeze(0)
        for block in self.blocks:
            h = h + block["attn"](block["ln1"](h))
            h = h + block["ffn"](block["ln2"](h))
        return h.squeeze(0)


class StreamProjector(nn.Module):
    """Layer norm followed by a 2-layer feed-forward map into d_c."""

    def __init__(self, d_in: int, hidden: int, d_c: int, rng: SeededRng):
        super().__init__()
        self.ln = nn.LayerNorm(d_in, eps=1e-5, dtype=_F64)
        self.fc1 = _linear(d_in, hidden, rng, scale=d_in**-0.5)
        self.fc2 = _linear(hidden, d_c, rng, scale=hidden**-0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(self.ln(x))))


@dataclass
class CompositeCondition:
    """Fused condition sequence with recorded segment boundaries.

    Segment order is fixed: semantic queries (DST), raw text (RTS), then
    prototypes (PS).  ``lengths`` are the three segment lengths; their sum
    equals ``tokens.shape[0]``.
    """

    tokens: torch.Tensor
    lengths: tuple[int, int, int]

    def __post_init__(self):
        if sum(self.lengths) != self.tokens.shape[0]:
            raise ValueError("segment lengths do not sum to sequence length")

    @property
    def boundaries(self) -> tuple[int, int, int, int]:
        a, b, c = self.lengths
        return (0, a, a + b, a + b + c)

    def segment(self, name: str) -> torch.Tensor:
        idx = {"dst": 0, "rts": 1, "ps": 2}[name]
        bounds = self.boundaries
        return self.tokens[bounds[idx] : bounds[idx + 1]]


def fuse(c_dst: torch.Tensor, c_rts: torch.Tensor, c_ps: torch.Tensor) -> CompositeCondition:
    """Concatenate the three streams along the sequence dimension."""
    width = c_dst.shape[-1]
    for name, seg in (("rts", c_rts), ("ps", c_ps)):
        if seg.shape[-1] != width:
            raise WidthMismatch(f"{name} width {seg.shape[-1]} != dst width {width}")
    tokens = torch.cat([c_dst, c_rts, c_ps], dim=0)
    return CompositeCondition(tokens=tokens,
                              lengths=(c_dst.shape[0], c_rts.shape[0], c_ps.shape[0]))


class ConditionEncoder(nn.Module):
    """Owns the three streams plus the learned null condition for guidance.

    Trainable: learnable queries, the three projectors, the null tokens.
    Frozen: the prompt embedding table and the backbone.
    """

    def __init__(self, cfg: MscConfig):
        super().__init__()
        self.cfg = cfg
        rng = SeededRng(cfg.seed)
        self.register_buffer(
            "embed_table",
            _tensor(rng.derive("embed"), cfg.prompt_buckets, cfg.d_c,
                    scale=cfg.d_c**-0.5))
        self.backbone = FrozenBackbone(cfg)
        self.queries = nn.Parameter(_tensor(rng.derive("queries"), cfg.n_q, cfg.d_c,
                                            scale=cfg.d_c**-0.5))
        self.proj_dst = StreamProjector(cfg.d_c, cfg.hidden, cfg.d_c, rng.derive("dst"))
        self.proj_rts = StreamProjector(cfg.d_c, cfg.hidden, cfg.d_c, rng.derive("rts"))
        self.proj_ps = StreamProjector(cfg.d_p, cfg.hidden, cfg.d_c, rng.derive("ps"))
        n_null = cfg.n_q + cfg.null_rts_tokens + cfg.null_ps_tokens
        self.null_tokens = nn.Parameter(_tensor(rng.derive("null"), n_null, cfg.d_c,
                                                scale=cfg.d_c**-0.5))

    def embed_prompt(self, prompt: str) -> torch.Tensor:
        """Hash tokens into the frozen embedding table; (L, d_c)."""
        tokens = tokenize(prompt)[: self.cfg.max_prompt_tokens]
        if not tokens:
            raise EmptyPrompt("prompt has no tokens")
        rows = [stable_hash64("prompt-token", t) % self.cfg.prompt_buckets for t in tokens]
        return self.embed_table[rows]

    def hls_forward(self, e_prompt: torch.Tensor) -> torch.Tensor:
        """Semantic stream: backbone over [prompt; queries], tail slice,
        then the DST projector.  Output (n_q, d_c)."""
        self._check_width(e_prompt, self.cfg.d_c, "prompt embedding")
        stacked = torch.cat([e_prompt, self.queries], dim=0)
        hidden = self.backbone(stacked)
        return self.proj_dst(hidden[-self.cfg.n_q:])

    def rts_forward(self, e_prompt: torch.Tensor) -> torch.Tensor:
        """Raw-text stream: per-token projection, length preserved."""
        self._check_width(e_prompt, self.cfg.d_c, "prompt embedding")
        return self.proj_rts(e_prompt)

    def ps_forward(self, proto_features: torch.Tensor) -> torch.Tensor:
        """Prototype stream: row-wise projection d_p -> d_c; empty stays empty."""
        self._check_width(proto_features, self.cfg.d_p, "prototype features")
        return self.proj_ps(proto_features)

    def encode(self, e_prompt: torch.Tensor, proto_features: torch.Tensor) -> CompositeCondition:
        return fuse(self.hls_forward(e_prompt), self.rts_forward(e_prompt),
                    self.ps_forward(proto_features))

    def encode_prompt(self, prompt: str, proto_features) -> CompositeCondition:
        feats = torch.as_tensor(np.asarray(proto_features, dtype=np.float64), dtype=_F64)
        if feats.numel() == 0:
            feats = feats.reshape(0, self.cfg.d_p)
        return self.encode(self.embed_prompt(prompt), feats)

    def null_condition(self) -> CompositeCondition:
        """The learned unconditional sequence used for guidance dropout."""
        cfg = self.cfg
        return CompositeCondition(tokens=self.null_tokens,
                                  lengths=(cfg.n_q, cfg.null_rts_tokens, cfg.null_ps_tokens))

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    @staticmethod
    def _check_width(x: torch.Tensor, want: int, name: str) -> None:
        if x.ndim != 2 or x.shape[-1] != want:
            raise WidthMismatch(f"{name} must be (n, {want}), got {tuple(x.shape)}")


def parameter_snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    """Clone every parameter; used to assert frozen-parameter contracts."""
    return {name: p.detach().clone() for name, p in module.named_parameters()}
