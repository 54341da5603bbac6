"""Adversarial training loop with switchable feedback / unetgan / cyclegan modes.

Per step and per direction the discriminator is updated first on real and
(detached) synthetic slices, then both generators are updated jointly through
their adversarial terms and the cycle reconstruction. In feedback mode the
probability map is recomputed from the current discriminator at every forward
pass and concatenated to the generator input; gradients are blocked through
the map so the generator cannot shape the discriminator via its own input.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .errors import ConfigurationError, DivergenceError, ValidationError
from .losses import LossBreakdown
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    UnetDiscriminator,
    UnetGenerator,
    build_discriminator,
    build_generator,
    derive_seed,
    validate_spatial,
)
from .phantom import load_manifest
from .preprocess import apply_fov_mask, clip_hu, normalize
from .volume import load_volume

MODES = ("feedback", "unetgan", "cyclegan")
CKPT_FORMAT_VERSION = "fbgan-ckpt/1"


@dataclass
class TrainConfig:
    mode: str = "feedback"
    batch_size: int = 4
    epochs: int = 200
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_cyc: float = 10.0
    local_reduction: str = "mean"
    local_weight: float = 1.0
    # None follows the mode; setting False in feedback mode disables the map
    # concatenation while keeping the rest, which is useful for ablations.
    feedback: bool | None = None
    seed: int = 0
    data_dir: str = ""
    out_dir: str = ""
    image_size: int = 64
    gen_widths: tuple[int, ...] = (32, 64, 128, 256)
    disc_widths: tuple[int, ...] = (32, 64, 128, 256)
    hu_lo: float = -1000.0
    hu_hi: float = 1000.0
    fov_radius_frac: float | None = None
    checkpoint_every: int = 50
    pairs: list[int] | None = None
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if self.local_reduction not in losses.LOCAL_REDUCTIONS:
            raise ConfigurationError(f"local_reduction must be one of {losses.LOCAL_REDUCTIONS}")
        if not self.hu_lo < self.hu_hi:
            raise ConfigurationError("hu_lo must be < hu_hi")
        self.gen_widths = tuple(int(w) for w in self.gen_widths)
        self.disc_widths = tuple(int(w) for w in self.disc_widths)
        depth = max(len(self.gen_widths), len(self.disc_widths))
        try:
            validate_spatial(int(self.image_size), depth)
        except ValidationError as e:
            raise ConfigurationError(str(e)) from e

    @property
    def feedback_enabled(self) -> bool:
        return self.mode == "feedback" if self.feedback is None else bool(self.feedback)

    @property
    def has_local_head(self) -> bool:
        return self.mode != "cyclegan"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gen_widths"] = list(self.gen_widths)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelBundle:
    g_y: UnetGenerator
    d_y: UnetDiscriminator
    g_x: UnetGenerator
    d_x: UnetDiscriminator

    def generators(self):
        return [self.g_y, self.g_x]

    def discriminators(self):
        return [self.d_y, self.d_x]

    def train(self):
        for m in self.generators() + self.discriminators():
            m.train()

    def eval(self):
        for m in self.generators() + self.discriminators():
            m.eval()


@dataclass
class TrainState:
    config: TrainConfig
    models: ModelBundle
    opt_d: torch.optim.Optimizer
    opt_g: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    last: LossBreakdown = field(default_factory=LossBreakdown)


def build_models(cfg: TrainConfig) -> ModelBundle:
    gen_cfg = GeneratorConfig(
        in_channels=2 if cfg.feedback_enabled else 1, widths=cfg.gen_widths
    )
    disc_cfg = DiscriminatorConfig(widths=cfg.disc_widths, local_head=cfg.has_local_head)
    return ModelBundle(
        g_y=build_generator(gen_cfg, derive_seed(cfg.seed, "G_Y")),
        d_y=build_discriminator(disc_cfg, derive_seed(cfg.seed, "D_Y")),
        g_x=build_generator(gen_cfg, derive_seed(cfg.seed, "G_X")),
        d_x=build_discriminator(disc_cfg, derive_seed(cfg.seed, "D_X")),
    )


def init_state(cfg: TrainConfig) -> TrainState:
    models = build_models(cfg)
    betas = (cfg.beta1, cfg.beta2)
    opt_d = torch.optim.Adam(
        list(models.d_y.parameters()) + list(models.d_x.parameters()), lr=cfg.lr, betas=betas
    )
    opt_g = torch.optim.Adam(
        list(models.g_y.parameters()) + list(models.g_x.parameters()), lr=cfg.lr, betas=betas
    )
    return TrainState(config=cfg, models=models, opt_d=opt_d, opt_g=opt_g)


def feedback_map(disc: UnetDiscriminator, image: torch.Tensor) -> torch.Tensor:
    """Probability map for the feedback channel; gradients are blocked through it."""
    out = disc(image)
    if out.prob_map is None:
        raise ConfigurationError("feedback requires a discriminator with a local head")
    return out.prob_map.detach()


def generator_input(
    image: torch.Tensor, disc: UnetDiscriminator, use_feedback: bool
) -> torch.Tensor:
    if not use_feedback:
        return image
    return torch.cat([image, feedback_map(disc, image)], dim=1)


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=ref.dtype, device=ref.device)


def discriminator_update(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> dict:
    """One update of D_Y and D_X on real slices and detached fakes."""
    cfg, m = state.config, state.models
    fb = cfg.feedback_enabled
    use_local = cfg.has_local_head and cfg.local_weight != 0.0

    with torch.no_grad():
        y_fake = m.g_y(generator_input(x, m.d_y, fb))
        x_fake = m.g_x(generator_input(y, m.d_x, fb))

    parts = {}
    total = None
    for tag, disc, real, fake in (("y", m.d_y, y, y_fake), ("x", m.d_x, x, x_fake)):
        out_real = disc(real)
        out_fake = disc(fake)
        g_part = losses.disc_global_loss(out_real.global_probs, out_fake.global_probs)
        if use_local:
            l_part = losses.disc_local_loss(
                out_real.prob_map, out_fake.prob_map, cfg.local_reduction
            )
        else:
            l_part = _zero(g_part)
        d_total = losses.disc_total_loss(g_part, l_part, cfg.local_weight)
        parts[f"d_global_{tag}"] = float(g_part.detach())
        parts[f"d_local_{tag}"] = float(l_part.detach())
        parts[f"d_total_{tag}"] = float(d_total.detach())
        total = d_total if total is None else total + d_total

    state.opt_d.zero_grad(set_to_none=True)
    total.backward()
    state.opt_d.step()
    state.opt_d.zero_grad(set_to_none=True)
    return parts


def generator_update(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> dict:
    """Joint update of G_Y and G_X through adversarial and cycle terms.

    Discriminator parameters are frozen for the duration so they accumulate
    no gradients from the generator objective.
    """
    cfg, m = state.config, state.models
    fb = cfg.feedback_enabled
    _set_requires_grad(m.discriminators(), False)
    try:
        y_fake = m.g_y(generator_input(x, m.d_y, fb))
        x_fake = m.g_x(generator_input(y, m.d_x, fb))
        out_y = m.d_y(y_fake)
        out_x = m.d_x(x_fake)
        g_adv_y = losses.gen_adv_loss(
            out_y.global_probs, out_y.prob_map, cfg.local_reduction, cfg.local_weight
        )
        g_adv_x = losses.gen_adv_loss(
            out_x.global_probs, out_x.prob_map, cfg.local_reduction, cfg.local_weight
        )
        x_cycled = m.g_x(generator_input(y_fake, m.d_x, fb))
        y_cycled = m.g_y(generator_input(x_fake, m.d_y, fb))
        cyc = losses.cycle_loss(x, x_cycled, y, y_cycled)
        total = g_adv_y + g_adv_x + cfg.lambda_cyc * cyc

        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
        state.opt_g.zero_grad(set_to_none=True)
    finally:
        _set_requires_grad(m.discriminators(), True)
    return {
        "g_adv_y": float(g_adv_y.detach()),
        "g_adv_x": float(g_adv_x.detach()),
        "cycle": float(cyc.detach()),
    }


def _check_batch(cfg: TrainConfig, t: torch.Tensor, name: str) -> None:
    if t.ndim != 4 or t.shape[1] != 1:
        raise ValidationError(f"{name} must be (N,1,H,W), got {tuple(t.shape)}")


def _raise_on_divergence(bd: LossBreakdown, step: int) -> None:
    for name in bd.field_names():
        if not np.isfinite(getattr(bd, name)):
            raise DivergenceError(f"loss term {name!r} is non-finite at step {step}")


def train_step(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> LossBreakdown:
    """One optimization step on an unpaired batch (x from domain X, y from Y)."""
    cfg = state.config
    _check_batch(cfg, x, "x batch")
    _check_batch(cfg, y, "y batch")
    parts = discriminator_update(state, x, y)
    parts.update(generator_update(state, x, y))
    bd = LossBreakdown(lambda_cyc=cfg.lambda_cyc, **parts)
    bd.total = losses.total_loss(bd, cfg.lambda_cyc)
    state.step += 1
    _raise_on_divergence(bd, state.step)
    state.last = bd
    return bd


# ---------------------------------------------------------------------------
# Data pipeline
# ---------------------------------------------------------------------------


def preprocess_volume_array(vol, cfg: TrainConfig) -> np.ndarray:
    """Training-time preprocessing: optional FOV crop, clip, normalize to [-1, 1]."""
    if cfg.fov_radius_frac is not None:
        vol = apply_fov_mask(vol, cfg.fov_radius_frac * min(vol.shape[1:]) / 2)
    vol = clip_hu(vol, cfg.hu_lo, cfg.hu_hi)
    return normalize(vol, cfg.hu_lo, cfg.hu_hi)


def load_training_slices(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """All X-domain (CBCT) and Y-domain (CT) slices of the selected pairs."""
    manifest = load_manifest(cfg.data_dir)
    pairs = manifest["pairs"]
    if cfg.pairs is not None:
        wanted = set(cfg.pairs)
        pairs = [p for p in pairs if p["id"] in wanted]
    if not pairs:
        raise ValidationError(f"no training pairs found in {cfg.data_dir}")
    data_dir = Path(cfg.data_dir)
    xs, ys = [], []
    for p in pairs:
        cbct = load_volume(data_dir / p["cbct"])
        ct = load_volume(data_dir / p["ct"])
        xs.append(preprocess_volume_array(cbct, cfg))
        ys.append(preprocess_volume_array(ct, cfg))
    x = np.concatenate(xs, axis=0)[:, None, :, :]
    y = np.concatenate(ys, axis=0)[:, None, :, :]
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ConfigurationError(
            f"data slices are {x.shape[2]}x{x.shape[3]}, config expects {cfg.image_size}"
        )
    return x, y


def epoch_batches(x: np.ndarray, y: np.ndarray, cfg: TrainConfig, epoch: int):
    """Deterministic unpaired batch stream for one epoch."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(cfg.seed), int(epoch))))
    n = min(len(x), len(y)) // cfg.batch_size
    if cfg.steps_per_epoch is not None:
        n = min(n, cfg.steps_per_epoch)
    if n < 1:
        raise ValidationError("dataset too small for a single batch")
    ix = rng.permutation(len(x))
    iy = rng.permutation(len(y))
    for k in range(n):
        sel_x = ix[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        sel_y = iy[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        yield torch.from_numpy(x[sel_x]), torch.from_numpy(y[sel_y])


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    payload = {
        "format": CKPT_FORMAT_VERSION,
        "mode": state.config.mode,
        "epoch": state.epoch,
        "step": state.step,
        "config": state.config.to_dict(),
        "models": {
            "g_y": state.models.g_y.state_dict(),
            "d_y": state.models.d_y.state_dict(),
            "g_x": state.models.g_x.state_dict(),
            "d_x": state.models.d_x.state_dict(),
        },
        "optimizers": {"d": state.opt_d.state_dict(), "g": state.opt_g.state_dict()},
    }
    torch.save(payload, path)


def load_checkpoint(path, expect: TrainConfig | None = None) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CKPT_FORMAT_VERSION:
        raise ConfigurationError(
            f"{path}: checkpoint format {payload.get('format')!r}, expected {CKPT_FORMAT_VERSION!r}"
        )
    cfg = TrainConfig.from_dict(payload["config"])
    if expect is not None:
        for name in ("mode", "image_size", "gen_widths", "disc_widths", "hu_lo", "hu_hi"):
            if getattr(cfg, name) != getattr(expect, name):
                raise ConfigurationError(
                    f"checkpoint {name}={getattr(cfg, name)!r} incompatible with "
                    f"requested {name}={getattr(expect, name)!r}"
                )
    state = init_state(cfg)
    state.models.g_y.load_state_dict(payload["models"]["g_y"])
    state.models.d_y.load_state_dict(payload["models"]["d_y"])
    state.models.g_x.load_state_dict(payload["models"]["g_x"])
    state.models.d_x.load_state_dict(payload["models"]["d_x"])
    state.opt_d.load_state_dict(payload["optimizers"]["d"])
    state.opt_g.load_state_dict(payload["optimizers"]["g"])
    state.epoch = int(payload["epoch"])
    state.step = int(payload["step"])
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _append_metrics(path: Path, epoch: int, means: LossBreakdown) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(["epoch"] + LossBreakdown.field_names())
        writer.writerow([epoch] + [f"{v:.8g}" for v in means.as_row()])


def _mean_breakdown(rows: list[LossBreakdown]) -> LossBreakdown:
    arr = np.array([r.as_row() for r in rows], dtype=np.float64).mean(axis=0)
    return LossBreakdown(**dict(zip(LossBreakdown.field_names(), arr.tolist())))


def train(cfg: TrainConfig, resume=None) -> dict:
    """Run the configured training, returning checkpoint and metrics paths."""
    out_dir = Path(cfg.out_dir) if cfg.out_dir else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"

    if resume is not None:
        state = load_checkpoint(resume, expect=cfg)
    else:
        state = init_state(cfg)
        if metrics_path.exists():
            metrics_path.unlink()

    x, y = load_training_slices(cfg)
    state.models.train()
    last_good = None
    try:
        while state.epoch < cfg.epochs:
            epoch = state.epoch
            rows = [
                train_step(state, bx, by) for bx, by in epoch_batches(x, y, cfg, epoch)
            ]
            state.epoch += 1
            _append_metrics(metrics_path, state.epoch, _mean_breakdown(rows))
            if state.epoch % cfg.checkpoint_every == 0 and state.epoch < cfg.epochs:
                ckpt = out_dir / f"ckpt_ep{state.epoch:04d}.pt"
                save_checkpoint(state, ckpt)
                last_good = ckpt
    except DivergenceError:
        if last_good is not None:
            (out_dir / "LAST_GOOD").write_text(str(last_good) + "\n")
        raise

    final = out_dir / "ckpt_final.pt"
    save_checkpoint(state, final)
    return {
        "final_checkpoint": str(final),
        "metrics_csv": str(metrics_path),
        "epochs_run": state.epoch,
    }


def load_train_config(path) -> TrainConfig:
    with open(path) as f:
        return TrainConfig.from_dict(json.load(f))
