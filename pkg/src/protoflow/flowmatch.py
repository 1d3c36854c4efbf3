"""Flow-matching training and Euler sampling for a mini diffusion transformer.

The straight path between data ``z0`` and noise ``z1`` is

    z_t = t * z0 + (1 - t) * z1,      velocity  v = z0 - z1,

so t=0 sits at noise and t=1 at data.  The transformer predicts the
velocity from (z_t, t, condition); the loss is plain MSE.  Sampling
integrates the learned field with a fixed-step Euler solver from t=0 to
t=1, optionally with classifier-free guidance against the encoder's
learned null condition.

Training runs in two stages: a warmup-plus-cosine schedule on the large
corpus, then a fixed low learning rate on the refined corpus.  All
stochastic draws (batch indices, timesteps, noise, condition dropout)
come from one seeded numpy stream, so runs are bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .bank import ChecksumMismatch, VersionMismatch
from .core import RNG_ALGORITHM, SeededRng, ShapeMismatch
from .matrixio import VERSION_F64, read_matrix, sha256_file, write_matrix
from .msc import (CompositeCondition, ConditionEncoder, FeedForward, MscConfig,
                  MultiHeadAttention, _linear, _tensor)

_F64 = torch.float64

CHECKPOINT_FORMAT_VERSION = 2


class NonFiniteLoss(RuntimeError):
    """Training loss became NaN/Inf; aborts the run with diagnostics."""


@dataclass
class FlowConfig:
    """Geometry of the velocity model."""

    d_latent: int = 2
    n_tokens: int = 1
    d_model: int = 32
    layers: int = 2
    heads: int = 4
    d_c: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")


@dataclass
class TrainConfig:
    """One training stage.

    Stage 1 uses linear warmup to ``peak_lr`` followed by cosine decay to
    ``min_lr``; stage 2 holds ``fixed_lr`` constant.  Optimizer is AdamW
    with decoupled weight decay.
    """

    stage: int = 1
    steps: int = 1000
    batch: int = 16
    peak_lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_fraction: float = 0.02
    fixed_lr: float = 2e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    uncond_drop_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        if not 0.0 <= self.uncond_drop_prob <= 1.0:
            raise ValueError("uncond_drop_prob must be in [0, 1]")


@dataclass
class SampleConfig:
    steps: int = 30
    guidance_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Learning rate at 1-based ``step`` of a stage.

    Stage 1: linear ramp over the first ``warmup_fraction`` of steps ends
    exactly at ``peak_lr``; cosine decay then lands exactly on ``min_lr``
    at the final step.  Stage 2: constant ``fixed_lr``.
    """
    if not 1 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside 1..{cfg.steps}")
    if cfg.stage == 2:
        return cfg.fixed_lr
    warmup = max(1, round(cfg.warmup_fraction * cfg.steps))
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    span = max(1, cfg.steps - warmup)
    progress = (step - warmup) / span
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def _pair(z0, z1) -> tuple[torch.Tensor, torch.Tensor]:
    a = torch.as_tensor(z0, dtype=_F64)
    b = torch.as_tensor(z1, dtype=_F64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def interpolate(z0, z1, t) -> torch.Tensor:
    """Point on the straight path: t*z0 + (1-t)*z1 (t=0 noise, t=1 data)."""
    a, b = _pair(z0, z1)
    t = torch.as_tensor(t, dtype=_F64)
    return t * a + (1.0 - t) * b


def target_velocity(z0, z1) -> torch.Tensor:
    """Constant velocity of the straight path: z0 - z1, independent of t."""
    a, b = _pair(z0, z1)
    return a - b


def flow_loss(pred, target) -> torch.Tensor:
    """Mean squared error over all elements (differentiable scalar)."""
    a, b = _pair(pred, target)
    return torch.mean((a - b) ** 2)


def _sinusoidal(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1]; (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=_F64) / half)
    args = t[:, None] * 1000.0 * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(t.shape[0], 1, dtype=_F64)], dim=1)
    return emb


class FlowModel(nn.Module):
    """Mini diffusion transformer predicting the flow velocity.

    Latent tokens are projected to ``d_model``, run through blocks of
    [modulated self-attention, cross-attention over the condition,
    modulated feed-forward], and projected back to the latent width.  The
    timestep drives a single shared modulation trunk whose output is
    offset by per-layer learned tables (scale/shift/gate pairs for the two
    modulated sublayers), i.e. adaptive layer-norm with one trunk shared
    across layers.  Output shape always equals input shape.
    """

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        rng = SeededRng(cfg.seed).derive("flow")
        d = cfg.d_model
        self.in_proj = _linear(cfg.d_latent, d, rng, scale=cfg.d_latent**-0.5)
        self.pos = nn.Parameter(_tensor(rng, cfg.n_tokens, d, scale=0.02))
        self.time_fc1 = _linear(d, d, rng)
        self.time_fc2 = _linear(d, 6 * d, rng)
        self.blocks = nn.ModuleList()
        for _ in range(cfg.layers):
            self.blocks.append(nn.ModuleDict({
                "attn": MultiHeadAttention(d, cfg.heads, rng),
                "xattn": MultiHeadAttention(d, cfg.heads, rng, d_kv=cfg.d_c),
                "ffn": FeedForward(d, 2 * d, rng),
            }))
        # Per-layer additive offsets on the shared modulation trunk.
        self.mod_offsets = nn.Parameter(torch.zeros(cfg.layers, 6, d, dtype=_F64))
        self.final_offset = nn.Parameter(torch.zeros(2, d, dtype=_F64))
        self.out_proj = _linear(d, cfg.d_latent, rng, scale=0.02)
        self._ln = nn.LayerNorm(d, eps=1e-5, elementwise_affine=False, dtype=_F64)

    @staticmethod
    def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
        return x * (1.0 + scale[:, None, :]) + shift[:, None, :]

    def forward(self, z: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        """z: (B, T, d_latent); t: scalar or (B,); cond: (S, d_c) shared or
        (B, S, d_c).  Returns the predicted velocity, same shape as z."""
        if z.ndim != 3 or z.shape[1] != self.cfg.n_tokens or z.shape[2] != self.cfg.d_latent:
            raise ShapeMismatch(
                f"latents must be (B, {self.cfg.n_tokens}, {self.cfg.d_latent}),"
                f" got {tuple(z.shape)}")
        b = z.shape[0]
        t = torch.as_tensor(t, dtype=_F64).reshape(-1)
        if t.shape[0] == 1:
            t = t.expand(b)
        if cond.ndim == 2:
            cond = cond.unsqueeze(0).expand(b, -1, -1)
        h = self.in_proj(z) + self.pos[None, :, :]
        trunk = self.time_fc2(torch.nn.functional.silu(self.time_fc1(_sinusoidal(t, self.cfg.d_model))))
        trunk = trunk.view(b, 6, self.cfg.d_model)
        for i, block in enumerate(self.blocks):
            mod = trunk + self.mod_offsets[i][None, :, :]
            sh1, sc1, g1, sh2, sc2, g2 = mod.unbind(dim=1)
            h = h + g1[:, None, :] * block["attn"](self._modulate(self._ln(h), sh1, sc1))
            h = h + block["xattn"](self._ln(h), cond)
            h = h + g2[:, None, :] * block["ffn"](self._modulate(self._ln(h), sh2, sc2))
        final = trunk[:, :2, :] + self.final_offset[None, :, :]
        h = self._modulate(self._ln(h), final[:, 0, :], final[:, 1, :])
        return self.out_proj(h)


@dataclass
class TrainItem:
    """One training example: a latent plus its precomputed condition inputs.

    Retrieval is frozen during training, so prompt embeddings and gathered
    prototype features are computed once; the condition itself is re-encoded
    through the current encoder parameters every step.
    """

    z0: torch.Tensor
    e_prompt: torch.Tensor
    proto: torch.Tensor


class FlowTrainer:
    """Couples the condition encoder and velocity model with one AdamW."""

    def __init__(self, encoder: ConditionEncoder, model: FlowModel, cfg: TrainConfig):
        self.encoder = encoder
        self.model = model
        self.cfg = cfg
        params = encoder.trainable_parameters() + list(model.parameters())
        self.optimizer = torch.optim.AdamW(
            params, lr=cfg.fixed_lr if cfg.stage == 2 else cfg.peak_lr,
            betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)

    def train_step(self, items: list[TrainItem], rng: SeededRng, step: int) -> float:
        """One optimizer update on a batch; returns the scalar loss.

        Per item: draw t ~ U(0,1) and z1 ~ N(0,1), form z_t and the target
        velocity, encode the condition (or swap in the learned null with
        probability ``uncond_drop_prob``), and accumulate the MSE.
        """
        cfg = self.cfg
        lr = learning_rate(cfg, step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad()
        losses = []
        for item in items:
            t = float(rng.uniform())
            z1 = torch.from_numpy(rng.normal(size=tuple(item.z0.shape))).to(_F64)
            dropped = bool(rng.uniform() < cfg.uncond_drop_prob)
            cond = (self.encoder.null_condition() if dropped
                    else self.encoder.encode(item.e_prompt, item.proto))
            z_t = interpolate(item.z0, z1, t)
            pred = self.model(z_t.unsqueeze(0), torch.tensor([t], dtype=_F64), cond.tokens)
            losses.append(flow_loss(pred, target_velocity(item.z0, z1).unsqueeze(0)))
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise NonFiniteLoss(
                f"non-finite loss at stage {cfg.stage} step {step} (lr={lr:.3e}); "
                f"item losses: {[float(l.detach()) for l in losses]}")
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())


def run_stage(encoder: ConditionEncoder, model: FlowModel, data: list[TrainItem],
              cfg: TrainConfig) -> list[float]:
    """Run one full stage over ``data``; returns the per-step loss history.

    Batches are drawn with replacement from one stream seeded by
    ``cfg.seed``; the optimizer is fresh at stage start (stage 2 inherits
    weights, not moments).
    """
    if not data:
        raise ValueError("training data must be non-empty")
    trainer = FlowTrainer(encoder, model, cfg)
    rng = SeededRng(cfg.seed).derive("stage", cfg.stage)
    history = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(len(data), size=cfg.batch)
        items = [data[int(i)] for i in idx]
        history.append(trainer.train_step(items, rng, step))
    return history


def run_two_stage(encoder: ConditionEncoder, model: FlowModel,
                  data_large: list[TrainItem], data_small: list[TrainItem],
                  cfg1: TrainConfig, cfg2: TrainConfig) -> dict:
    """Alignment stage on the large corpus, then low-LR refinement on the
    small one, continuing from the stage-1 weights."""
    if cfg1.stage != 1 or cfg2.stage != 2:
        raise ValueError("expected cfg1.stage == 1 and cfg2.stage == 2")
    history1 = run_stage(encoder, model, data_large, cfg1)
    history2 = run_stage(encoder, model, data_small, cfg2)
    return {"stage1_loss": history1, "stage2_loss": history2,
            "stage1_config": asdict(cfg1), "stage2_config": asdict(cfg2)}


def euler_sample(model: FlowModel, cond: CompositeCondition,
                 cfg: SampleConfig, count: int = 1,
                 null_cond: CompositeCondition | None = None,
                 z_init: torch.Tensor | None = None) -> torch.Tensor:
    """Integrate the velocity field from noise (t=0) to data (t=1).

    Fixed-step Euler over ``cfg.steps`` uniform sub-intervals.  With
    guidance s != 1 and a null condition, the integrated field is
    v_u + s*(v_c - v_u); s == 1 (or no null condition) runs the
    conditional field only, bit-identical to conditional-only sampling.
    Returns (count, T, d_latent).
    """
    if z_init is not None:
        z = torch.as_tensor(z_init, dtype=_F64).clone()
    else:
        rng = SeededRng(cfg.seed).derive("euler")
        z = torch.from_numpy(
            rng.normal(size=(count, model.cfg.n_tokens, model.cfg.d_latent))).to(_F64)
    use_guidance = null_cond is not None and cfg.guidance_scale != 1.0
    dt = 1.0 / cfg.steps
    with torch.no_grad():
        for i in range(cfg.steps):
            t = torch.full((z.shape[0],), i * dt, dtype=_F64)
            v_c = model(z, t, cond.tokens)
            if use_guidance:
                v_u = model(z, t, null_cond.tokens)
                v = v_u + cfg.guidance_scale * (v_c - v_u)
            else:
                v = v_c
            z = z + dt * v
    return z


def _param_filename(index: int, key: str) -> str:
    return f"{index:03d}__{key.replace('.', '__')}.upbk"


def save_checkpoint(directory: str | Path, encoder: ConditionEncoder, model: FlowModel,
                    extra: dict | None = None) -> None:
    """Write all tensors (trainable and frozen) plus configs to a directory.

    Tensors are stored at float64 so that load(save(m)) samples
    bit-identically to m.
    """
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    state = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
    state.update({f"model.{k}": v for k, v in model.state_dict().items()})
    params = {}
    for index, (key, tensor) in enumerate(sorted(state.items())):
        fname = _param_filename(index, key)
        arr = tensor.detach().cpu().numpy().astype(np.float64)
        write_matrix(directory / "params" / fname, arr.reshape(1, -1) if arr.size else
                     np.zeros((1, 0)), version=VERSION_F64)
        params[key] = {"file": fname, "shape": list(tensor.shape)}
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "rng_algorithm": RNG_ALGORITHM,
        "msc_config": asdict(encoder.cfg),
        "flow_config": asdict(model.cfg),
        "params": params,
        "extra": extra or {},
    }
    manifest["checksums"] = {
        meta["file"]: sha256_file(directory / "params" / meta["file"])
        for meta in params.values()
    }
    (directory / "checkpoint.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(directory: str | Path) -> tuple[ConditionEncoder, FlowModel, dict]:
    """Rebuild encoder and model from a checkpoint directory, verifying
    checksums and tensor shapes."""
    directory = Path(directory)
    manifest = json.loads((directory / "checkpoint.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatch(
            f"checkpoint format {manifest.get('format_version')!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}")
    for fname, digest in manifest["checksums"].items():
        actual = sha256_file(directory / "params" / fname)
        if actual != digest:
            raise ChecksumMismatch(f"{fname}: stored {digest[:12]}.., found {actual[:12]}..")
    encoder = ConditionEncoder(MscConfig(**manifest["msc_config"]))
    model = FlowModel(FlowConfig(**manifest["flow_config"]))
    state: dict[str, torch.Tensor] = {}
    for key, meta in manifest["params"].items():
        arr = read_matrix(directory / "params" / meta["file"], expect_version=VERSION_F64)
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        if arr.size != n:
            raise ShapeMismatch(f"{key}: file has {arr.size} values, shape {shape} needs {n}")
        state[key] = torch.from_numpy(arr.reshape(shape).copy()).to(_F64)
    encoder.load_state_dict({k[len("encoder."):]: v for k, v in state.items()
                             if k.startswith("encoder.")})
    model.load_state_dict({k[len("model."):]: v for k, v in state.items()
                           if k.startswith("model.")})
    return encoder, model, manifest.get("extra", {})
