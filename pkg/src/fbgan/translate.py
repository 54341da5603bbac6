"""Volume translation with a trained checkpoint.

A volume is preprocessed exactly as at training time (parameters come from
the checkpoint), translated slice by slice, and denormalized back to HU.
In feedback mode each slice is first shown to the discriminator, whose
probability map is concatenated to the slice before the generator runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, ValidationError
from .models import UnetDiscriminator, UnetGenerator
from .preprocess import slices_to_volume
from .train import TrainState, load_checkpoint, preprocess_volume_array
from .volume import Volume, load_volume, save_volume

DIRECTIONS = ("x2y", "y2x")


@dataclass
class TranslationJob:
    checkpoint: str
    inputs: list
    out_dir: str
    direction: str = "x2y"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigurationError(f"direction must be one of {DIRECTIONS}")


def translate_slice(
    x: torch.Tensor,
    disc: UnetDiscriminator,
    gen: UnetGenerator,
    use_feedback: bool,
) -> torch.Tensor:
    """Translate a normalized (N,1,H,W) slice batch with frozen networks."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValidationError(f"expected (N,1,H,W) slices, got {tuple(x.shape)}")
    with torch.no_grad():
        if use_feedback:
            prob_map = disc(x).prob_map
            if prob_map is None:
                raise ConfigurationError("feedback checkpoint requires a local head")
            if prob_map.min() < 0 or prob_map.max() > 1:
                raise ValidationError("probability map left [0, 1]")
            x = torch.cat([x, prob_map], dim=1)
        return gen(x)


def _networks_for(state: TrainState, direction: str):
    if direction == "x2y":
        return state.models.d_y, state.models.g_y
    return state.models.d_x, state.models.g_x


def translate_volume(vol: Volume, state: TrainState, direction: str = "x2y") -> Volume:
    """Whole-volume translation; output keeps spacing, modality becomes SYNTH."""
    cfg = state.config
    if vol.shape[1] != cfg.image_size or vol.shape[2] != cfg.image_size:
        raise ConfigurationError(
            f"volume slices are {vol.shape[1]}x{vol.shape[2]}, checkpoint expects {cfg.image_size}"
        )
    disc, gen = _networks_for(state, direction)
    state.models.eval()
    norm = preprocess_volume_array(vol, cfg)
    slices = torch.from_numpy(norm[:, None, :, :])
    out = translate_slice(slices, disc, gen, cfg.feedback_enabled)
    synth = slices_to_volume(out.numpy(), vol, cfg.hu_lo, cfg.hu_hi)
    if cfg.fov_radius_frac is not None:
        synth.fov_radius_px = cfg.fov_radius_frac * min(vol.shape[1:]) / 2
    return synth


def run_translation(job: TranslationJob) -> list[str]:
    """Translate every input volume and save results under the output directory."""
    state = load_checkpoint(job.checkpoint)
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for item in job.inputs:
        src = Path(item)
        vol = load_volume(src)
        synth = translate_volume(vol, state, job.direction)
        stem = out_dir / f"synth_{src.stem}"
        save_volume(synth, stem)
        written.append(str(stem))
    return written


def list_input_volumes(path) -> list[str]:
    """A single .vol stem, or every .vol file under a directory."""
    p = Path(path)
    if p.is_dir():
        stems = sorted(str(f.with_suffix("")) for f in p.glob("*.vol"))
        if not stems:
            raise ValidationError(f"no .vol files in {p}")
        return stems
    if p.with_suffix(".vol").exists() or p.suffix == ".vol":
        return [str(p.with_suffix(""))]
    raise ValidationError(f"input {p} is neither a directory nor a volume")
