"""Procedural multi-view cabin scene with a known RGB -> thermal mapping.

Three warm bodies (head, left hand, right hand) move smoothly inside a
unit cabin box; x runs left-right, y top-bottom, z away from the front
camera.  A flat panel at depth ``PANEL_Z`` hides bodies behind it from the
front camera.  The overhead view looks down the y axis, the profile view
along x, and the tablet camera is oblique.

The thermal camera sits beside the front camera: heat blobs land shifted
sideways in proportion to depth, and the panel (at ambient temperature)
blocks heat from bodies behind it except for what spills past its edges.
Depth is visible only in the other three views, and the front view also
loses hidden hands, so the four views together determine the thermal
image while the front view alone does not.
"""

import functools
import math
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from .dataio import (
    MANIFEST_NAME,
    STREAMS_NAME,
    VIEWS,
    DatasetManifest,
    SyncedSample,
    frame_relpath,
    write_png,
    write_stream_index,
)
from .rng import RngSeed

BODIES = ("head", "left_hand", "right_hand")


@dataclass(frozen=True)
class SceneConfig:
    image_side: int = 64
    rgb_rate: float = 30.0
    thermal_rate: float = 6.0
    samples_per_subject: int = 500
    n_subjects: int = 17
    seed: int = 0
    gain_spread: float = 0.3
    occluder_transmission: float = 0.0
    motion_scale: float = 1.0
    thermal_parallax: float = 0.6

    def __post_init__(self):
        if self.rgb_rate <= 0 or self.thermal_rate <= 0:
            raise ValueError("rates must be positive")
        if self.thermal_rate >= self.rgb_rate:
            raise ValueError("thermal rate must be below the RGB rate")
        if self.image_side < 4:
            raise ValueError("image side too small")
        if not 0 <= self.gain_spread < 1:
            raise ValueError("gain spread must be in [0, 1)")

    @property
    def sequence_seconds(self):
        return self.samples_per_subject / self.thermal_rate


# panel rectangle in the front image plane, and its depth
PANEL = (0.52, 0.88, 0.50, 0.82)  # x0, x1, y0, y1
PANEL_Z = 0.45

THERMAL_BACKGROUND = 48.0
HEAT_AMPLITUDE = {"head": 150.0, "left_hand": 120.0, "right_hand": 120.0}

VIEW_BACKGROUND = {
    "front": (62, 70, 88),
    "overhead": (88, 76, 60),
    "profile": (58, 84, 66),
    "tablet": (80, 64, 90),
}
PANEL_COLOR = (150, 150, 158)


@dataclass(frozen=True)
class SubjectAppearance:
    subject: int
    skin: tuple
    sleeve: tuple
    thermal_gain: float
    thermal_offset: float
    head_axes: tuple  # (x half-axis, y half-axis) in cabin units
    hand_radius: float
    motion_seed: int


def subject_appearance(subject, config):
    """Deterministic, injective appearance for a subject id."""
    rng = RngSeed(config.seed, 1000 + subject).generator()
    # golden-ratio hue walk keeps skin tones distinct across ids
    phase = (subject * 0.6180339887) % 1.0
    skin = (
        int(150 + 70 * phase),
        int(105 + 50 * ((phase * 3.0) % 1.0)),
        int(80 + 40 * ((phase * 7.0) % 1.0)),
    )
    sleeve = tuple(int(v) for v in rng.integers(20, 120, size=3))
    spread = config.gain_spread
    gain = 1.0 + spread * float(rng.uniform(-1.0, 1.0))
    offset = float(rng.uniform(-6.0, 6.0)) if spread > 0 else 0.0
    head_axes = (0.11 + 0.02 * float(rng.uniform()), 0.14 + 0.02 * float(rng.uniform()))
    hand_radius = 0.055 + 0.01 * float(rng.uniform())
    return SubjectAppearance(subject, skin, sleeve, gain, offset, head_axes, hand_radius, 10_000 + subject)


# ---------------------------------------------------------------- motion


@dataclass
class SceneState:
    t_ms: float
    positions: dict  # body -> (x, y, z)
    velocities: dict = field(default_factory=dict)


# (centre, per-axis amplitude budget) for each body; amplitudes keep bodies inside the frame
_MOTION = {
    "head": ((0.32, 0.28, 0.70), (0.05, 0.04, 0.04)),
    "left_hand": ((0.25, 0.68, 0.35), (0.13, 0.14, 0.2)),
    "right_hand": ((0.68, 0.64, 0.46), (0.2, 0.17, 0.3)),
}


class MotionPath:
    """Smooth bounded trajectories: per-axis sums of sinusoids with seeded frequencies and phases."""

    def __init__(self, appearance, scale=1.0):
        rng = RngSeed(appearance.motion_seed, 7).generator()
        self.terms = {}
        for body in BODIES:
            centre, budget = _MOTION[body]
            axes = []
            for axis in range(3):
                freqs = rng.uniform(0.15, 1.2, size=3) * scale
                weights = rng.dirichlet(np.ones(3))
                phases = rng.uniform(0, 2 * math.pi, size=3)
                axes.append((centre[axis], budget[axis] * weights, 2 * math.pi * freqs, phases))
            self.terms[body] = axes

    def state(self, t_ms):
        t = t_ms / 1000.0
        pos, vel = {}, {}
        for body, axes in self.terms.items():
            p, v = [], []
            for c, amp, omega, ph in axes:
                p.append(float(c + np.sum(amp * np.sin(omega * t + ph))))
                v.append(float(np.sum(amp * omega * np.cos(omega * t + ph))))
            pos[body] = tuple(p)
            vel[body] = tuple(v)
        return SceneState(t_ms, pos, vel)


def occluded_in_front(state, body):
    """True when the body's centre projects inside the panel and lies behind it."""
    x, y, z = state.positions[body]
    x0, x1, y0, y1 = PANEL
    return z > PANEL_Z and x0 <= x <= x1 and y0 <= y <= y1


# ---------------------------------------------------------------- rendering


@functools.lru_cache(maxsize=8)
def _grid(side):
    c = (np.arange(side) + 0.5) / side
    u, v = np.meshgrid(c, c, indexing="xy")  # u (columns), v (rows)
    u.flags.writeable = False
    v.flags.writeable = False
    return u, v


def _ellipse_mask(u, v, cu, cv, au, av):
    return ((u - cu) / au) ** 2 + ((v - cv) / av) ** 2 <= 1.0


def _rect_mask(u, v, u0, u1, v0, v1):
    return (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)


def _shade(color, factor):
    return tuple(int(min(255, max(0, round(c * factor)))) for c in color)


def _project(view, p):
    """Image-plane (u, v) and painter depth (larger is farther) of a 3D point."""
    x, y, z = p
    if view == "front":
        return x, y, z
    if view == "overhead":
        return x, z, y
    if view == "profile":
        return z, y, -x
    # tablet: oblique camera low on the right
    return 0.75 * x + 0.25 * z, 0.6 * y + 0.4 * z, -0.5 * x + 0.5 * y - 0.7 * z


def render_view(view, state, appearance, side):
    u, v = _grid(side)
    img = np.empty((side, side, 3), dtype=np.uint8)
    img[:] = VIEW_BACKGROUND[view]
    # fixed seat shape so views are not flat backgrounds
    seat = _rect_mask(u, v, 0.1, 0.9, 0.85, 0.97)
    img[seat] = _shade(VIEW_BACKGROUND[view], 0.7)

    items = []
    for body in BODIES:
        cu, cv, depth = _project(view, state.positions[body])
        if body == "head":
            au, av = appearance.head_axes
            color = appearance.skin
        else:
            au = av = appearance.hand_radius
            color = _shade(appearance.skin, 0.9)
        if view == "overhead":
            # lit from above: higher bodies (smaller y) are brighter
            color = _shade(color, 0.65 + 0.55 * (1.0 - state.positions[body][1]))
        items.append((depth, "body", (cu, cv, au, av, color)))
    if view == "front":
        x0, x1, y0, y1 = PANEL
        items.append((PANEL_Z, "panel", (x0, x1, y0, y1)))
    elif view == "profile":
        x0, x1, y0, y1 = PANEL
        items.append((-1e9, "panel", (PANEL_Z - 0.01, PANEL_Z + 0.01, y0, y1)))
    elif view == "overhead":
        x0, x1, _, _ = PANEL
        items.append((1e9, "panel", (x0, x1, PANEL_Z - 0.01, PANEL_Z + 0.01)))
    elif view == "tablet":
        x0, x1, y0, y1 = PANEL
        u0, v0, _ = _project("tablet", (x0, y0, PANEL_Z))
        u1, v1, _ = _project("tablet", (x1, y1, PANEL_Z))
        items.append((1e9, "panel", (u0, u1, v0, v1)))

    # painter's algorithm: farthest first; stable order on ties
    items.sort(key=lambda it: -it[0])
    for _, kind, geom in items:
        if kind == "panel":
            img[_rect_mask(u, v, *geom)] = PANEL_COLOR
        else:
            cu, cv, au, av, color = geom
            img[_ellipse_mask(u, v, cu, cv, au, av)] = color
    return img


def render_views(state, appearance, side):
    """Front, overhead, profile and tablet frames as (side, side, 3) uint8."""
    return [render_view(v, state, appearance, side) for v in VIEWS]


def _heat_sigma(body, appearance):
    if body == "head":
        ax, ay = appearance.head_axes
        return 0.75 * ax, 0.75 * ay
    r = appearance.hand_radius
    return 1.3 * r, 1.3 * r


def thermal_position(p, parallax):
    """Where a body at cabin point ``p`` lands in the thermal image.

    The thermal camera sits beside the front camera, so bodies shift
    horizontally in proportion to their depth relative to the panel.
    """
    x, y, z = p
    return x + parallax * (z - PANEL_Z), y


def thermal_field(u, v, state, appearance, transmission=0.0, parallax=0.0):
    """Thermal code (before quantisation) at image-plane points ``(u, v)``.

    Background plus a Gaussian heat kernel per body, scaled by the
    subject's gain and shifted by its offset.  Heat from bodies behind the
    panel is attenuated to ``transmission`` inside the panel rectangle;
    outside it their heat still shows, so a hidden hand leaves a rim
    around the panel edges.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x0, x1, y0, y1 = PANEL
    in_panel = _rect_mask(u, v, x0, x1, y0, y1)
    heat = np.zeros_like(u)
    for body in BODIES:
        bz = state.positions[body][2]
        bx, by = thermal_position(state.positions[body], parallax)
        sx, sy = _heat_sigma(body, appearance)
        k = HEAT_AMPLITUDE[body] * np.exp(-0.5 * (((u - bx) / sx) ** 2 + ((v - by) / sy) ** 2))
        if bz > PANEL_Z:
            k = np.where(in_panel, k * transmission, k)
        heat = heat + k
    return THERMAL_BACKGROUND + appearance.thermal_offset + appearance.thermal_gain * heat


def render_thermal(state, appearance, side, transmission=0.0, parallax=0.0):
    u, v = _grid(side)
    code = thermal_field(u, v, state, appearance, transmission, parallax)
    return np.clip(np.rint(code), 0, 255).astype(np.uint8)


def empty_state(t_ms=0.0):
    """A state with every body parked far outside the frame."""
    far = (50.0, 50.0, 0.9)
    return SceneState(t_ms, {b: far for b in BODIES}, {b: (0.0, 0.0, 0.0) for b in BODIES})


# ---------------------------------------------------------------- timestamps


def frame_timestamps(n, rate, jitter_ms=0.0, rng=None):
    """Integer-millisecond timestamps of ``n`` frames at ``rate`` Hz."""
    ts = np.floor(np.arange(n) * (1000.0 / rate) + 0.5).astype(np.int64)
    if jitter_ms and rng is not None:
        ts = ts + np.rint(rng.uniform(-jitter_ms, jitter_ms, size=n)).astype(np.int64)
        ts = np.maximum.accumulate(np.maximum(ts, 0))
        for i in range(1, n):
            if ts[i] <= ts[i - 1]:
                ts[i] = ts[i - 1] + 1
    return ts


@dataclass
class SubjectSequence:
    """Everything rendered for one subject, kept in memory."""

    subject: int
    appearance: SubjectAppearance
    rgb_ts: np.ndarray
    thermal_ts: np.ndarray
    views: dict  # view -> list of frames at rgb_ts
    thermal: list  # frames at thermal_ts
    states: list  # SceneState at rgb_ts


def simulate_subject(config, subject, n_thermal=None, with_rgb=True):
    app = subject_appearance(subject, config)
    path = MotionPath(app, config.motion_scale)
    n_th = config.samples_per_subject if n_thermal is None else n_thermal
    ratio = config.rgb_rate / config.thermal_rate
    n_rgb = int(math.floor((n_th - 1) * ratio)) + 1
    rgb_ts = frame_timestamps(n_rgb, config.rgb_rate)
    th_ts = frame_timestamps(n_th, config.thermal_rate)
    S = config.image_side
    states = [path.state(float(t)) for t in rgb_ts]
    views = {v: [] for v in VIEWS}
    if with_rgb:
        for st in states:
            for v, img in zip(VIEWS, render_views(st, app, S)):
                views[v].append(img)
    thermal = [render_thermal(path.state(float(t)), app, S, config.occluder_transmission, config.thermal_parallax) for t in th_ts]
    return SubjectSequence(subject, app, rgb_ts, th_ts, views, thermal, states)


def ground_truth_thermal(config, subject, timestamps):
    """Thermal frames at arbitrary timestamps (for scoring gap filling)."""
    app = subject_appearance(subject, config)
    path = MotionPath(app, config.motion_scale)
    return [render_thermal(path.state(float(t)), app, config.image_side, config.occluder_transmission,
                           config.thermal_parallax)
            for t in timestamps]


# ---------------------------------------------------------------- dataset


def _write_subject(root, config, subject, stream_rows, truth_lines):
    seq = simulate_subject(config, subject)
    samples = []
    rgb_index = {int(t): i for i, t in enumerate(seq.rgb_ts)}
    for v in VIEWS:
        os.makedirs(os.path.join(root, f"subject_{subject:02d}", v), exist_ok=True)
    os.makedirs(os.path.join(root, f"subject_{subject:02d}", "thermal"), exist_ok=True)
    for i, t in enumerate(seq.rgb_ts):
        for v in VIEWS:
            rel = frame_relpath(subject, v, i, t)
            write_png(os.path.join(root, rel), seq.views[v][i])
            stream_rows.append((subject, v, i, t, rel, config.rgb_rate))
        st = seq.states[i]
        truth_lines.append(
            "\t".join(
                [str(subject), str(int(t))]
                + [f"{c:.6f}" for b in BODIES for c in st.positions[b]]
                + ["1" if occluded_in_front(st, "right_hand") else "0"]
            )
        )
    for j, t in enumerate(seq.thermal_ts):
        rel = frame_relpath(subject, "thermal", j, t)
        write_png(os.path.join(root, rel), seq.thermal[j])
        stream_rows.append((subject, "thermal", j, t, rel, config.thermal_rate))
        k = rgb_index[int(t)]  # thermal instants coincide with RGB instants by construction
        samples.append(
            SyncedSample(
                subject=subject,
                thermal_ts=int(t),
                thermal=rel,
                view_ts={v: int(seq.rgb_ts[k]) for v in VIEWS},
                views={v: frame_relpath(subject, v, k, seq.rgb_ts[k]) for v in VIEWS},
            )
        )
    return samples


def generate_dataset(config, root, subjects=None):
    """Render every subject to ``root`` and write index.tsv, streams.tsv and scene_truth.tsv.

    On failure the partially written dataset is removed.
    """
    if subjects is None:
        subjects = range(config.n_subjects)
    subjects = list(subjects)
    created = not os.path.exists(root)
    os.makedirs(root, exist_ok=True)
    written = []
    try:
        samples = []
        stream_rows = []
        truth = []
        for s in subjects:
            written.append(os.path.join(root, f"subject_{s:02d}"))
            samples.extend(_write_subject(root, config, s, stream_rows, truth))
        manifest = DatasetManifest(root=os.path.abspath(root), samples=samples, split="unsplit", seed=config.seed)
        manifest.write(os.path.join(root, MANIFEST_NAME))
        write_stream_index(os.path.join(root, STREAMS_NAME), stream_rows)
        header = "subject\tts\t" + "\t".join(f"{b}_{a}" for b in BODIES for a in "xyz") + "\tright_hand_hidden\n"
        with open(os.path.join(root, "scene_truth.tsv"), "w", encoding="utf-8", newline="\n") as f:
            f.write("# thermalgan scene ground truth v1\n" + header + "\n".join(truth) + "\n")
        with open(os.path.join(root, "scene_config.txt"), "w", encoding="utf-8", newline="\n") as f:
            for k, v in scene_config_items(config):
                f.write(f"{k}={v}\n")
        return manifest
    except BaseException:
        if created:
            shutil.rmtree(root, ignore_errors=True)
        else:
            for d in written:
                shutil.rmtree(d, ignore_errors=True)
            for name in (MANIFEST_NAME, STREAMS_NAME, "scene_truth.tsv", "scene_config.txt"):
                p = os.path.join(root, name)
                if os.path.exists(p):
                    os.remove(p)
        raise


def scene_config_items(config):
    return [(k, getattr(config, k)) for k in config.__dataclass_fields__]


def read_scene_config(root):
    """Scene configuration a dataset was generated with."""
    path = os.path.join(root, "scene_config.txt")
    kw = {}
    types = {k: f.type for k, f in SceneConfig.__dataclass_fields__.items()}
    with open(path, encoding="utf-8") as f:
        for line in f:
            k, _, v = line.strip().partition("=")
            if not k:
                continue
            kind = types[k]
            kw[k] = int(v) if kind in (int, "int") else float(v)
    return SceneConfig(**kw)
