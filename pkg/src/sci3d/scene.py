"""Object-state vectors and the shape rasterizer behind the synthetic scenes.

A frame is a function of the per-object state slots plus two render-only
motion channels (spin angle and horizontal squash) that are zero outside
rotate/flip events. Everything the state vector encodes - position, size,
shape, color, material - is what the rasterizer draws, which is what makes
render_frame(states) a usable reconstruction oracle.
"""

import numpy as np

SHAPES = ("triangle", "square", "circle")
COLORS = ("red", "green", "blue", "yellow")
MATERIALS = ("matte", "shiny")

COLOR_RGB = np.array(
    [
        [0.86, 0.20, 0.18],
        [0.24, 0.63, 0.24],
        [0.20, 0.43, 0.86],
        [0.90, 0.78, 0.20],
    ],
    dtype=np.float32,
)

BACKGROUND = np.array([0.08, 0.08, 0.10], dtype=np.float32)

# Slot vector layout:
#   [exists, x, y, z, shape one-hot (3), color one-hot (4), size, material one-hot (2)]
EXISTS = 0
POS = slice(1, 4)
SHAPE = slice(4, 7)
COLOR = slice(7, 11)
SIZE = 11
MATERIAL = slice(12, 14)
STATE_DIM = 14

MAX_OBJECTS = 6

# size field stores circumradius in pixels divided by this, keeping it in (0, 1)
SIZE_SCALE = 16.0

_OUTLINE_HALFWIDTH = 1.2
_MIN_XSCALE = 0.12


def make_state(x, y, shape_idx, color_idx, radius_px, material_idx):
    """Build one occupied state slot.

    x, y are normalized center coordinates in [0, 1]; z is fixed at 0 for the
    planar scenes here but keeps its slot so the layout carries over to 3D
    renderers unchanged.
    """
    s = np.zeros(STATE_DIM, dtype=np.float32)
    s[EXISTS] = 1.0
    s[1] = x
    s[2] = y
    s[3] = 0.0
    s[SHAPE.start + int(shape_idx)] = 1.0
    s[COLOR.start + int(color_idx)] = 1.0
    s[SIZE] = radius_px / SIZE_SCALE
    s[MATERIAL.start + int(material_idx)] = 1.0
    return s


def validate_state_set(states):
    """Check a (K, STATE_DIM) slot array for structural validity."""
    states = np.asarray(states)
    if states.ndim != 2 or states.shape[1] != STATE_DIM:
        raise ValueError(f"state set must be (K, {STATE_DIM}), got {states.shape}")
    if not np.isfinite(states).all():
        raise ValueError("state set contains non-finite values")
    exists = states[:, EXISTS]
    if not np.isin(exists, (0.0, 1.0)).all():
        raise ValueError("exists flags must be 0 or 1")
    occupied = states[exists > 0.5]
    for name, sl in (("shape", SHAPE), ("color", COLOR), ("material", MATERIAL)):
        block = occupied[:, sl]
        if not np.isin(block, (0.0, 1.0)).all() or not (block.sum(axis=1) == 1.0).all():
            raise ValueError(f"{name} fields of occupied slots must be one-hot")
    if (occupied[:, SIZE] <= 0).any():
        raise ValueError("occupied slots must have positive size")
    if ((occupied[:, POS] < 0) | (occupied[:, POS] > 1)).any():
        raise ValueError("positions must lie in [0, 1]")


def _shape_sdf(shape_idx, lx, ly, radius):
    # signed distance in pixels, negative inside
    if shape_idx == 2:  # circle
        return np.hypot(lx, ly) - radius
    if shape_idx == 1:  # square, matched in area feel via a 0.74 half-width factor
        half = radius * 0.74
        qx = np.abs(lx) - half
        qy = np.abs(ly) - half
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        return outside + np.minimum(np.maximum(qx, qy), 0.0)
    # equilateral triangle via three half-planes; inradius is half the circumradius
    d = None
    for k in range(3):
        a = np.pi / 2 + 2 * np.pi * k / 3
        plane = lx * np.cos(a) + ly * np.sin(a) - radius / 2
        d = plane if d is None else np.maximum(d, plane)
    return d


def render_frame(states, canvas, angles=None, xscales=None):
    """Rasterize one frame from state slots.

    states   (K, STATE_DIM) float array
    canvas   (H, W)
    angles   optional (K,) spin angle per slot, radians
    xscales  optional (K,) horizontal squash per slot, sign flips mirror

    Returns (H, W, 3) uint8. Slots are painted in index order, so later slots
    occlude earlier ones.
    """
    states = np.asarray(states, dtype=np.float32)
    validate_state_set(states)
    h, w = int(canvas[0]), int(canvas[1])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    img = np.tile(BACKGROUND, (h, w, 1)).astype(np.float32)

    for k, s in enumerate(states):
        if s[EXISTS] <= 0.5:
            continue
        cx = s[1] * w
        cy = s[2] * h
        radius = s[SIZE] * SIZE_SCALE
        shape_idx = int(np.argmax(s[SHAPE]))
        rgb = COLOR_RGB[int(np.argmax(s[COLOR]))]
        shiny = bool(np.argmax(s[MATERIAL]))

        dx = xx - cx
        dy = yy - cy
        angle = 0.0 if angles is None else float(angles[k])
        if angle != 0.0:
            ca, sa = np.cos(-angle), np.sin(-angle)
            dx, dy = dx * ca - dy * sa, dx * sa + dy * ca
        xscale = 1.0 if xscales is None else float(xscales[k])
        if abs(xscale) < _MIN_XSCALE:
            xscale = _MIN_XSCALE if xscale >= 0 else -_MIN_XSCALE
        dx = dx / xscale

        d = _shape_sdf(shape_idx, dx, dy, radius)
        if shiny:
            cov = np.clip(0.5 + _OUTLINE_HALFWIDTH - np.abs(d), 0.0, 1.0)
        else:
            cov = np.clip(0.5 - d, 0.0, 1.0)
        img = img * (1.0 - cov[..., None]) + rgb * cov[..., None]

    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def render_from_states(states, canvas):
    """Rasterize with the motion channels at rest (no spin, no squash)."""
    return render_frame(states, canvas)
