"""PNG rendering of identity maps with a fixed golden-ratio hue palette."""

from __future__ import annotations

import colorsys

import numpy as np
from PIL import Image

from .core import IdentityMap

GOLDEN_HUE_STEP = 0.618034


def identity_color(g: int) -> tuple[int, int, int]:
    """RGB of id ``g``: black for 0, otherwise hue ``fract(g * 0.618034)`` at full saturation and value."""
    if g == 0:
        return (0, 0, 0)
    hue = (g * GOLDEN_HUE_STEP) % 1.0
    return tuple(int(round(255 * v)) for v in colorsys.hsv_to_rgb(hue, 1.0, 1.0))


def identity_image(idmap: IdentityMap) -> np.ndarray:
    """``(H, W, 3)`` uint8 rendering of an identity map."""
    ids = idmap.ids
    uniq, inverse = np.unique(ids, return_inverse=True)
    palette = np.array([identity_color(int(g)) for g in uniq], dtype=np.uint8)
    return palette[inverse.reshape(ids.shape)]


def render_identity(idmap: IdentityMap, path) -> None:
    Image.fromarray(identity_image(idmap), mode="RGB").save(path, format="PNG")
