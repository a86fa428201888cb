import math
from dataclasses import replace

import numpy as np
import pytest

from thermalgan.dataio import VIEWS, DatasetManifest, read_png, read_stream_index, split_by_subject, synchronize
from thermalgan.synthscene import (
    BODIES,
    HEAT_AMPLITUDE,
    PANEL,
    PANEL_Z,
    THERMAL_BACKGROUND,
    MotionPath,
    SceneConfig,
    SceneState,
    empty_state,
    frame_timestamps,
    generate_dataset,
    occluded_in_front,
    read_scene_config,
    render_thermal,
    render_view,
    render_views,
    simulate_subject,
    subject_appearance,
)

CFG = SceneConfig(image_side=32, samples_per_subject=12, n_subjects=3)


def hidden_hand_state():
    return SceneState(
        0.0,
        {
            "head": (0.3, 0.28, 0.7),
            "left_hand": (0.25, 0.68, 0.35),
            "right_hand": (0.70, 0.66, 0.70),
        },
    )


def test_renders_are_pure():
    app = subject_appearance(1, CFG)
    st = MotionPath(app).state(1234.0)
    a = render_views(st, app, 32)
    b = render_views(st, app, 32)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert np.array_equal(render_thermal(st, app, 32), render_thermal(st, app, 32))


def test_hidden_hand_missing_from_front_present_overhead():
    app = subject_appearance(0, CFG)
    st = hidden_hand_state()
    assert occluded_in_front(st, "right_hand")
    parked = replace(st, positions={**st.positions, "right_hand": (50.0, 50.0, 0.7)})
    side = 64
    front_diff = np.any(render_view("front", st, app, side) != render_view("front", parked, app, side), axis=-1)
    over_diff = np.any(render_view("overhead", st, app, side) != render_view("overhead", parked, app, side), axis=-1)
    assert front_diff.sum() == 0
    # a disc of the hand radius covers about pi r^2 of the image
    expected = math.pi * (app.hand_radius * side) ** 2
    assert 0.7 * expected < over_diff.sum() < 1.3 * expected


def test_visible_hand_shows_in_front():
    app = subject_appearance(0, CFG)
    st = hidden_hand_state()
    front = replace(st, positions={**st.positions, "right_hand": (0.70, 0.66, 0.30)})
    parked = replace(st, positions={**st.positions, "right_hand": (50.0, 50.0, 0.3)})
    assert not occluded_in_front(front, "right_hand")
    diff = np.any(render_view("front", front, app, 64) != render_view("front", parked, app, 64), axis=-1)
    assert diff.sum() > 0


def test_subjects_render_differently():
    st = hidden_hand_state()
    a = render_views(st, subject_appearance(0, CFG), 32)
    b = render_views(st, subject_appearance(1, CFG), 32)
    assert all(not np.array_equal(x, y) for x, y in zip(a, b))


def test_appearance_injective_over_ids():
    apps = [subject_appearance(s, SceneConfig()) for s in range(17)]
    assert len({(a.skin, a.thermal_gain, a.thermal_offset) for a in apps}) == 17
    assert all(0.7 <= a.thermal_gain <= 1.3 for a in apps)


def test_empty_scene_is_constant_background():
    app = subject_appearance(2, CFG)
    img = render_thermal(empty_state(), app, 32)
    assert np.all(img == img[0, 0])
    assert img[0, 0] == round(THERMAL_BACKGROUND + app.thermal_offset)


def test_hotter_gain_raises_mean_code():
    app = subject_appearance(0, CFG)
    st = hidden_hand_state()
    cool = render_thermal(st, replace(app, thermal_gain=0.8), 32)
    hot = render_thermal(st, replace(app, thermal_gain=1.2), 32)
    assert hot.astype(float).mean() > cool.astype(float).mean()


def scalar_field(u, v, state, app, transmission, parallax):
    """Per-pixel evaluation with plain floats, written from the scene description."""
    x0, x1, y0, y1 = PANEL
    total = THERMAL_BACKGROUND + app.thermal_offset
    for body in BODIES:
        bx, by, bz = state.positions[body]
        cx = bx + parallax * (bz - PANEL_Z)
        if body == "head":
            sx, sy = 0.75 * app.head_axes[0], 0.75 * app.head_axes[1]
        else:
            sx = sy = 1.3 * app.hand_radius
        k = HEAT_AMPLITUDE[body] * math.exp(-0.5 * (((u - cx) / sx) ** 2 + ((v - by) / sy) ** 2))
        if bz > PANEL_Z and x0 <= u <= x1 and y0 <= v <= y1:
            k *= transmission
        total += app.thermal_gain * k
    return min(255, max(0, round(total)))


@pytest.mark.parametrize("transmission,parallax", [(0.0, 0.6), (0.3, 0.0)])
def test_thermal_matches_pointwise_field(transmission, parallax):
    rng = np.random.default_rng(8)
    side = 48
    app = subject_appearance(3, CFG)
    path = MotionPath(app)
    for t in (0.0, 2500.0, hidden_hand_state()):
        st = t if isinstance(t, SceneState) else path.state(t)
        img = render_thermal(st, app, side, transmission, parallax)
        for _ in range(100):
            r, c = (int(i) for i in rng.integers(0, side, 2))
            expected = scalar_field((c + 0.5) / side, (r + 0.5) / side, st, app, transmission, parallax)
            assert img[r, c] == expected


def test_motion_is_bounded_and_continuous():
    app = subject_appearance(5, SceneConfig())
    path = MotionPath(app)
    prev = None
    for t in np.arange(0, 60000, 33.0):
        st = path.state(float(t))
        for b in BODIES:
            assert all(0.0 < c < 1.0 for c in st.positions[b])
        if prev is not None:
            for b in BODIES:
                step = np.subtract(st.positions[b], prev.positions[b])
                assert np.max(np.abs(step)) < 0.1
        prev = st


def test_hidden_hand_is_common():
    app = subject_appearance(0, SceneConfig())
    path = MotionPath(app)
    hidden = [occluded_in_front(path.state(float(t)), "right_hand") for t in np.arange(0, 80000, 167.0)]
    assert 0.1 < np.mean(hidden) < 0.6


def test_rate_ratio_gives_five_rgb_per_thermal():
    rgb = frame_timestamps(50, 30.0)
    th = frame_timestamps(10, 6.0)
    assert set(th) <= set(rgb)
    per_period = [np.sum((rgb >= a) & (rgb < b)) for a, b in zip(th[:-1], th[1:])]
    assert per_period == [5] * 9


def test_simulated_thermal_instants_coincide_with_rgb():
    seq = simulate_subject(CFG, 0)
    assert len(seq.thermal_ts) == 12
    assert set(seq.thermal_ts) <= set(seq.rgb_ts)
    assert len(seq.views["front"]) == len(seq.rgb_ts)


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(thermal_rate=30.0)
    with pytest.raises(ValueError):
        SceneConfig(rgb_rate=0)


def test_generate_dataset_layout_and_determinism(tmp_path):
    m1 = generate_dataset(CFG, str(tmp_path / "a"))
    generate_dataset(CFG, str(tmp_path / "b"))
    assert len(m1) == 36
    assert (tmp_path / "a" / "index.tsv").read_bytes() == (tmp_path / "b" / "index.tsv").read_bytes()
    m = DatasetManifest.read(str(tmp_path / "a" / "index.tsv"))
    m.check_files()
    s = m.samples[4]
    assert s.thermal == f"subject_00/thermal/000004_ts{s.thermal_ts}.png"
    assert read_png(m.resolve(s.thermal)).shape == (32, 32)
    assert read_png(m.resolve(s.views["tablet"])).shape == (32, 32, 3)
    assert read_scene_config(str(tmp_path / "a")) == CFG
    train, val, test = split_by_subject(m)
    assert len(train) + len(val) + len(test) == 36


def test_stream_index_resynchronizes_to_manifest(tmp_path):
    m = generate_dataset(CFG, str(tmp_path), subjects=[1])
    streams = read_stream_index(str(tmp_path / "streams.tsv"))[1]
    assert len(streams["front"]) == 5 * (CFG.samples_per_subject - 1) + 1
    synced = synchronize(streams, subject=1)
    assert [s.thermal_ts for s in synced] == [s.thermal_ts for s in m.samples]
    assert all(s.max_skew == 0 for s in synced)
    assert all(set(s.view_ts) == set(VIEWS) for s in synced)


def test_generate_dataset_cleans_up_on_failure(tmp_path, monkeypatch):
    import thermalgan.synthscene as ss

    calls = {"n": 0}
    real = ss.write_png

    def flaky(path, arr):
        calls["n"] += 1
        if calls["n"] > 30:
            raise OSError("disk full")
        real(path, arr)

    monkeypatch.setattr(ss, "write_png", flaky)
    root = tmp_path / "ds"
    with pytest.raises(OSError):
        generate_dataset(CFG, str(root))
    assert not root.exists()
