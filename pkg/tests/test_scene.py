import numpy as np
import pytest

from sci3d.scene import (
    BACKGROUND,
    COLOR,
    COLOR_RGB,
    EXISTS,
    MATERIAL,
    MAX_OBJECTS,
    POS,
    SHAPE,
    SIZE,
    SIZE_SCALE,
    STATE_DIM,
    make_state,
    render_frame,
    render_from_states,
    validate_state_set,
)

CANVAS = (64, 64)


def one_object(shape=2, material=0, x=0.5, y=0.5, radius=8.0, color=0):
    states = np.zeros((MAX_OBJECTS, STATE_DIM), dtype=np.float32)
    states[0] = make_state(x, y, shape, color, radius, material)
    return states


def test_make_state_layout():
    s = make_state(0.25, 0.75, 1, 2, 8.0, 1)
    assert s.shape == (STATE_DIM,)
    assert s[EXISTS] == 1.0
    assert s[1] == pytest.approx(0.25) and s[2] == pytest.approx(0.75)
    assert s[3] == 0.0
    assert list(s[SHAPE]) == [0.0, 1.0, 0.0]
    assert list(s[COLOR]) == [0.0, 0.0, 1.0, 0.0]
    assert s[SIZE] == pytest.approx(8.0 / SIZE_SCALE)
    assert list(s[MATERIAL]) == [0.0, 1.0]


def test_validate_accepts_empty_and_occupied():
    validate_state_set(np.zeros((MAX_OBJECTS, STATE_DIM), dtype=np.float32))
    validate_state_set(one_object())


@pytest.mark.parametrize(
    "mutate",
    [
        lambda s: s.__setitem__((0, EXISTS), 0.5),
        lambda s: s.__setitem__((0, SHAPE.start), 1.0),  # two shape bits
        lambda s: s.__setitem__((0, SIZE), 0.0),
        lambda s: s.__setitem__((0, 1), 1.5),
        lambda s: s.__setitem__((0, 2), np.nan),
    ],
)
def test_validate_rejects_malformed(mutate):
    states = one_object(shape=1)
    mutate(states)
    with pytest.raises(ValueError):
        validate_state_set(states)


def test_validate_rejects_wrong_shape():
    with pytest.raises(ValueError):
        validate_state_set(np.zeros((3, STATE_DIM - 1)))


def test_render_empty_scene_is_background():
    img = render_frame(np.zeros((MAX_OBJECTS, STATE_DIM), dtype=np.float32), CANVAS)
    assert img.shape == (64, 64, 3)
    assert img.dtype == np.uint8
    expected = np.clip(np.rint(BACKGROUND * 255.0), 0, 255).astype(np.uint8)
    assert (img.reshape(-1, 3) == expected).all()


def test_render_deterministic():
    states = one_object(shape=0, material=1)
    a = render_frame(states, CANVAS)
    b = render_frame(states, CANVAS)
    assert (a == b).all()


def test_object_pixels_show_its_color():
    for color in range(4):
        img = render_frame(one_object(shape=2, color=color), CANVAS)
        center = img[32, 32].astype(np.float64) / 255.0
        assert np.abs(center - COLOR_RGB[color]).max() < 0.02


def test_matte_fills_shiny_outlines():
    filled = render_frame(one_object(shape=2, material=0), CANVAS)
    outlined = render_frame(one_object(shape=2, material=1), CANVAS)
    bg = np.clip(np.rint(BACKGROUND * 255.0), 0, 255).astype(np.uint8)
    # center of a shiny circle shows background, matte shows paint
    assert (outlined[32, 32] == bg).all()
    assert not (filled[32, 32] == bg).all()
    # both touch the rim
    assert not (outlined[32, 32 + 8] == bg).all() or not (outlined[32 + 8, 32] == bg).all()


def test_shapes_render_distinctly():
    imgs = [render_frame(one_object(shape=s), CANVAS) for s in range(3)]
    assert not (imgs[0] == imgs[1]).all()
    assert not (imgs[1] == imgs[2]).all()
    assert not (imgs[0] == imgs[2]).all()


def test_rotation_changes_triangle_not_circle():
    tri = one_object(shape=0)
    circ = one_object(shape=2)
    angles = np.zeros(MAX_OBJECTS)
    angles[0] = 0.7
    assert not (
        render_frame(tri, CANVAS, angles=angles) == render_frame(tri, CANVAS)
    ).all()
    assert (
        render_frame(circ, CANVAS, angles=angles) == render_frame(circ, CANVAS)
    ).all()


def test_xscale_squashes_horizontally():
    states = one_object(shape=1)
    xscales = np.ones(MAX_OBJECTS)
    xscales[0] = 0.4
    squashed = render_frame(states, CANVAS, xscales=xscales)
    plain = render_frame(states, CANVAS)
    bg = np.clip(np.rint(BACKGROUND * 255.0), 0, 255).astype(np.uint8)
    on = lambda img: (img.reshape(-1, 3) != bg).any(axis=1).sum()
    assert on(squashed) < on(plain)


def test_painters_order_later_slot_wins():
    states = np.zeros((MAX_OBJECTS, STATE_DIM), dtype=np.float32)
    states[0] = make_state(0.5, 0.5, 2, 0, 8.0, 0)  # red under
    states[1] = make_state(0.5, 0.5, 2, 2, 8.0, 0)  # blue over
    img = render_frame(states, CANVAS)
    center = img[32, 32].astype(np.float64) / 255.0
    assert np.abs(center - COLOR_RGB[2]).max() < 0.02


def test_render_from_states_matches_rest_channels():
    states = one_object(shape=0)
    assert (render_from_states(states, CANVAS) == render_frame(states, CANVAS)).all()
