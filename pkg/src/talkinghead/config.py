"""Run configuration: a flat ``key=value`` text file over :class:`Config` fields."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class Config:
    # imaging
    image_size: int = 128          # full-resolution frames / fine output
    coarse_size: int = 64          # volume-rendered inner face
    source_size: int = 64          # encoder input
    cam_distance: float = 2.0      # nominal camera-to-head distance of the data
    n_samples: int = 32
    background: float = 0.5
    scene_bound: float = 0.6       # half-size of the rendered cube around the head

    # appearance encoder
    plane_channels: int = 12       # per plane, per level
    pyramid_channels: int = 36

    # deformation field
    grid_size: int = 16
    n_slots: int = 8
    slot_dim: int = 32
    slot_iters: int = 3
    heads: int = 4
    attn_dim: int = 32
    audio_window: int = 64
    audio_dim: int = 32
    samples_per_frame: int = 16    # envelope samples per video frame
    pe_octaves: int = 4
    deform_hidden: int = 64
    delta_max: float = 0.15
    deform_enabled: bool = True
    decoder_audio: bool = False

    # decoder / refiner
    decoder_hidden: int = 64
    sr_channels: int = 16

    # lip-sync discriminator
    sync_frames: int = 5
    sync_dim: int = 64
    lip_h: int = 16
    lip_w: int = 32
    eta: float = 0.5
    literal_sync_loss: bool = False
    sync_steps: int = 1500
    sync_batch: int = 32
    sync_lr: float = 1e-3

    # loss weights
    lambda_per: float = 0.01
    lambda_adv: float = 1.0
    lambda_sync: float = 0.5
    lambda_deform: float = 0.001
    lambda_gate: float = 1e-4         # pressure on the deformation gate; keeps the heatmap peaked

    # optimisation
    seed: int = 0
    steps: int = 3000
    lr: float = 1e-3
    lr_final: float = 1e-4         # cosine decay target at the last step
    beta1: float = 0.9
    beta2: float = 0.999
    disc_lr: float = 2e-4
    rays_per_frame: int = 128
    patch_size: int = 16
    sync_every: int = 10
    aux_start: int = 1000          # adversarial and sync terms join after this many steps
    aux_ratio: float = 0.5         # cap on each auxiliary gradient norm, relative to reconstruction
    aux_ramp: int = 500            # steps over which that cap grows from 0 to aux_ratio
    checkpoint_every: int = 500
    source_frame: int = -1         # -1: frame with the widest mouth opening

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def replace(self, **changes) -> "Config":
        unknown = set(changes) - set(self.keys())
        if unknown:
            raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    base = base or Config()
    kinds = {f.name: type(getattr(base, f.name)) for f in fields(base)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"unknown config key: {key}")
        changes[key] = _coerce(key, kinds[key], value)
    return dataclasses.replace(base, **changes)


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))
