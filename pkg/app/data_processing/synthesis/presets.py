"""Multi-digit dataset presets.

Two families: ``II-01`` .. ``II-05`` (two digits on a 64px canvas) and
``III-01`` .. ``III-10`` (three digits on a 96px canvas). Within a family every
difficulty knob grows with the level: digits move closer together (overlap),
the scale range widens, rotation and flipping get stronger, centers jitter
more, and from level 4 on Gaussian noise is added.
"""

import logging
import re

from app.backend.core.errors import UnknownPreset
from app.backend.core.schemas import DatasetConfig, DigitSlot

logger = logging.getLogger(__name__)

# (levels, canvas, spacing at level 1, spacing at the last level, max rotation, max flip, max jitter, max noise)
FAMILIES: dict[str, tuple[int, int, float, float, float, float, float, float]] = {
    "II": (5, 64, 0.36, 0.26, 10.0, 0.25, 0.02, 0.08),
    "III": (10, 96, 0.25, 0.18, 15.0, 0.5, 0.03, 0.10),
}

NOISE_FROM_LEVEL = 4

_PRESET_ID = re.compile(r"(II|III)-(\d{2})")


def preset_ids() -> list[str]:
    return [f"{family}-{level:02d}" for family, spec in FAMILIES.items() for level in range(1, spec[0] + 1)]


def preset(preset_id: str, seed: int = 0) -> DatasetConfig:
    m = _PRESET_ID.fullmatch(preset_id)
    if not m:
        raise UnknownPreset(f"unknown dataset preset {preset_id!r}; known: {', '.join(preset_ids())}")
    family, level = m.group(1), int(m.group(2))
    levels, canvas, spacing_lo, spacing_hi, rot, flip, jitter, noise = FAMILIES[family]
    if not 1 <= level <= levels:
        raise UnknownPreset(f"unknown dataset preset {preset_id!r}; known: {', '.join(preset_ids())}")

    t = (level - 1) / (levels - 1)           # 0 at the easiest level, 1 at the hardest
    spacing = spacing_lo + (spacing_hi - spacing_lo) * t
    digits = 2 if family == "II" else 3
    offset = (digits - 1) / 2
    slots = [
        DigitSlot(
            center=(0.5 + (i - offset) * spacing, 0.5),
            scale=(1.0 - 0.2 * t, 1.0 + 0.1 * t),
            rotation_deg=(-rot * t, rot * t),
            flip_prob=flip * t,
            jitter=jitter * t,
        )
        for i in range(digits)
    ]
    noise_std = noise * t if level >= NOISE_FROM_LEVEL else 0.0
    return DatasetConfig(id=preset_id, slots=slots, canvas=canvas, noise_std=noise_std, seed=seed)
