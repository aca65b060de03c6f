"""BYOL training loop.

An online network (encoder -> projector -> predictor) learns to predict a
slowly moving target network's projection of a second augmented view. The
target is never touched by the optimizer; it only tracks the online weights
through an exponential moving average.
"""

import copy
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..augment import AugmentConfig, make_pair
from .encoder import ConvEncoder, EncoderSpec, _init_linear

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1.5e-6
    ema_tau: float = 0.99
    ema_schedule: str = "constant"  # "constant" | "cosine" (tau -> 1 over the run)
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (projector uses batch norm)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.ema_tau <= 1.0:
            raise ValueError("ema_tau must lie in [0, 1]")
        if self.ema_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown ema_schedule {self.ema_schedule!r}")


class MLPHead(nn.Module):
    """Two-layer MLP (linear -> BN -> ReLU -> linear) used as projector and
    predictor."""

    def __init__(self, in_dim: int, out_dim: int, hidden_mult: int = 4, seed: int = 0):
        super().__init__()
        hidden = hidden_mult * out_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )
        gen = torch.Generator().manual_seed(seed)
        for layer in self.net:
            if isinstance(layer, nn.Linear):
                _init_linear(layer, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass
class BYOLState:
    online_encoder: ConvEncoder
    online_projector: MLPHead
    online_predictor: MLPHead
    target_encoder: ConvEncoder
    target_projector: MLPHead
    step: int = 0

    def online_modules(self) -> tuple[nn.Module, nn.Module]:
        return self.online_encoder, self.online_projector

    def target_modules(self) -> tuple[nn.Module, nn.Module]:
        return self.target_encoder, self.target_projector


def byol_loss(prediction: torch.Tensor, target_projection: torch.Tensor) -> torch.Tensor:
    """2 - 2*cos(prediction, target_projection), averaged over rows.

    Bounded to [0, 4]; invariant to positive rescaling of either side. The
    caller detaches the target side; this function does not.
    """
    p = prediction if prediction.dim() == 2 else prediction.unsqueeze(0)
    z = target_projection if target_projection.dim() == 2 else target_projection.unsqueeze(0)
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(z.shape)}")
    p_norm = p.norm(dim=1)
    z_norm = z.norm(dim=1)
    if (p_norm == 0).any() or (z_norm == 0).any():
        raise ValueError("byol_loss is undefined for zero-norm vectors")
    cos = (p * z).sum(dim=1) / (p_norm * z_norm)
    return (2.0 - 2.0 * cos).mean()


def ema_update(target_params, online_params, tau: float) -> None:
    """target <- tau*target + (1-tau)*online, elementwise over tensor pairs.

    Computed out of place and copied in, so recomputing the same expression
    from recorded histories reproduces the result bit for bit.
    """
    targets = list(target_params)
    onlines = list(online_params)
    if len(targets) != len(onlines):
        raise ValueError("parameter lists differ in length")
    with torch.no_grad():
        for t, o in zip(targets, onlines):
            if t.shape != o.shape:
                raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(o.shape)}")
            t.copy_(tau * t + (1.0 - tau) * o)


def ema_update_module(target: nn.Module, online: nn.Module, tau: float) -> None:
    """EMA over parameters and float buffers; integer buffers (batch-norm step
    counters) are copied verbatim."""
    ema_update(target.parameters(), online.parameters(), tau)
    with torch.no_grad():
        for (tn, tb), (on, ob) in zip(target.named_buffers(), online.named_buffers()):
            if tn != on or tb.shape != ob.shape:
                raise ValueError(f"buffer mismatch {tn} vs {on}")
            if tb.is_floating_point():
                tb.copy_(tau * tb + (1.0 - tau) * ob)
            else:
                tb.copy_(ob)


def _ema_tau_at(config: TrainConfig, step: int) -> float:
    if config.ema_schedule == "constant" or config.steps == 0:
        return config.ema_tau
    frac = step / config.steps
    return 1.0 - (1.0 - config.ema_tau) * (math.cos(math.pi * frac) + 1.0) / 2.0


def init_state(encoder_spec: EncoderSpec, seed: int) -> BYOLState:
    """Build online and target networks; the target starts as an exact copy."""
    keys = [int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(3)]
    encoder = ConvEncoder(encoder_spec, seed=keys[0])
    projector = MLPHead(encoder_spec.embed_dim, encoder_spec.embed_dim, seed=keys[1])
    predictor = MLPHead(encoder_spec.embed_dim, encoder_spec.embed_dim, seed=keys[2])
    target_encoder = copy.deepcopy(encoder)
    target_projector = copy.deepcopy(projector)
    for p in target_encoder.parameters():
        p.requires_grad_(False)
    for p in target_projector.parameters():
        p.requires_grad_(False)
    return BYOLState(encoder, projector, predictor, target_encoder, target_projector)


@dataclass
class TrainResult:
    state: BYOLState
    loss_trace: list[float]

    @property
    def encoder(self) -> ConvEncoder:
        return self.state.online_encoder


def train(
    dataset,
    encoder_spec: EncoderSpec,
    augment_config: AugmentConfig,
    train_config: TrainConfig,
    on_step=None,
) -> TrainResult:
    """Run the BYOL loop over a stack of grayscale uint8 images.

    dataset: array or sequence of HxW uint8 images matching
    augment_config.output_size after augmentation. Deterministic given
    train_config.seed up to the compute backend's floating-point behavior.
    on_step, when given, is called with the state after every update; used
    to audit the target-network recurrence.
    """
    train_config.validate()
    augment_config.validate()
    encoder_spec.validate()
    images = list(dataset)
    if not images:
        raise ValueError("dataset is empty")
    if augment_config.output_size != encoder_spec.input_size:
        raise ValueError(
            f"augmented view size {augment_config.output_size} does not match "
            f"encoder input {encoder_spec.input_size}"
        )

    state = init_state(encoder_spec, train_config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 100]))
    optimizer = torch.optim.Adam(
        [
            *state.online_encoder.parameters(),
            *state.online_projector.parameters(),
            *state.online_predictor.parameters(),
        ],
        lr=train_config.learning_rate,
        betas=(train_config.adam_beta1, train_config.adam_beta2),
        weight_decay=train_config.weight_decay,
    )

    trace: list[float] = []
    for step in range(train_config.steps):
        idx = rng.integers(0, len(images), size=train_config.batch_size)
        views1, views2 = [], []
        for i in idx:
            v1, v2 = make_pair(images[int(i)], augment_config, rng)
            views1.append(v1)
            views2.append(v2)
        batch = np.stack(views1 + views2).astype(np.float32) / 255.0
        x = torch.from_numpy(batch).unsqueeze(1)

        embed = state.online_predictor(state.online_projector(state.online_encoder(x)))
        with torch.no_grad():
            target = state.target_projector(state.target_encoder(x))
        n = train_config.batch_size
        p1, p2 = embed[:n], embed[n:]
        z1, z2 = target[:n], target[n:]
        loss = byol_loss(p1, z2.detach()) + byol_loss(p2, z1.detach())

        value = float(loss.detach())
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        tau = _ema_tau_at(train_config, step)
        ema_update_module(state.target_encoder, state.online_encoder, tau)
        ema_update_module(state.target_projector, state.online_projector, tau)
        state.step = step + 1
        trace.append(value)
        if on_step is not None:
            on_step(state)

    return TrainResult(state=state, loss_trace=trace)


def save_checkpoint(
    path: Path,
    encoder: ConvEncoder,
    train_config: TrainConfig,
    step: int,
) -> None:
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "encoder_spec": asdict(encoder.spec),
        "state_dict": encoder.state_dict(),
        "train_config": asdict(train_config),
        "step": step,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path) -> tuple[ConvEncoder, TrainConfig, int]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    spec_dict = dict(payload["encoder_spec"])
    for key in ("input_size", "channels", "strides"):
        spec_dict[key] = tuple(spec_dict[key])
    spec = EncoderSpec(**spec_dict)
    encoder = ConvEncoder(spec)
    encoder.load_state_dict(payload["state_dict"])
    encoder.eval()
    config = TrainConfig(**payload["train_config"])
    return encoder, config, int(payload["step"])


def save_loss_trace(path: Path, trace: list[float]) -> None:
    lines = [f"{i}\t{v:.10g}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_loss_trace(path: Path) -> list[float]:
    values = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            _, v = line.split("\t")
            values.append(float(v))
    return values
