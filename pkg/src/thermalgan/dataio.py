"""Sensor streams, thermal calibration, synchronization, collages and manifests.

Dataset layout on disk::

    root/subject_XX/{thermal,front,overhead,profile,tablet}/NNNNNN_ts<ms>.png
    root/index.tsv      synced samples, one per line
    root/streams.tsv    every recorded frame of every stream, one per line
"""

import enum
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .rng import RngSeed
from .tensor import ContractError

MODALITIES = ("thermal", "front", "overhead", "profile", "tablet")
VIEWS = ("front", "overhead", "profile", "tablet")

MANIFEST_NAME = "index.tsv"
STREAMS_NAME = "streams.tsv"


class InputStyle(str, enum.Enum):
    FRONT = "front"
    TESSELLATED = "tessellated"
    STACKED = "stacked"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {
            "frontview": "front",
            "tesselated": "tessellated",
            "fourviewtessellated": "tessellated",
            "fourviewstacked": "stacked",
        }
        v = str(value).lower().replace("_", "").replace("-", "")
        v = aliases.get(v, v)
        try:
            return cls(v)
        except ValueError:
            raise ValueError(f"unknown input style {value!r}; expected front, tessellated or stacked") from None


# ---------------------------------------------------------------- calibration


@dataclass
class ThermalCalibration:
    """Linear map between temperature in degrees C and 8-bit codes."""

    min_temp: float = -20.0
    max_temp: float = 300.0
    max_code: float = 255.0
    clamped: int = 0

    def thermal_to_code(self, temp_c):
        t = np.asarray(temp_c, dtype=np.float64)
        out_of_range = (t < self.min_temp) | (t > self.max_temp)
        self.clamped += int(np.count_nonzero(out_of_range))
        t = np.clip(t, self.min_temp, self.max_temp)
        code = (t - self.min_temp) / (self.max_temp - self.min_temp) * self.max_code
        return float(code) if code.ndim == 0 else code

    def code_to_thermal(self, code):
        c = np.asarray(code, dtype=np.float64)
        t = c / self.max_code * (self.max_temp - self.min_temp) + self.min_temp
        return float(t) if t.ndim == 0 else t

    def quantize(self, temp_c):
        """Temperature to the integer code a sensor would store."""
        return np.rint(self.thermal_to_code(temp_c)).astype(np.uint8)


CALIBRATION = ThermalCalibration()


def thermal_to_code(temp_c):
    return CALIBRATION.thermal_to_code(temp_c)


def code_to_thermal(code):
    return CALIBRATION.code_to_thermal(code)


# ---------------------------------------------------------------- streams


@dataclass
class FrameStream:
    """One modality's frames, sorted by timestamp (integer milliseconds).

    A frame reference is either a file path or an in-memory array.
    """

    modality: str
    rate_hz: float
    timestamps: np.ndarray
    frames: list = field(default_factory=list)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.timestamps.ndim != 1:
            raise ValueError("timestamps must be one-dimensional")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError(f"{self.modality} timestamps are not strictly increasing")
        if self.frames and len(self.frames) != len(self.timestamps):
            raise ValueError(f"{self.modality}: {len(self.frames)} frames for {len(self.timestamps)} timestamps")

    def __len__(self):
        return len(self.timestamps)

    def frame(self, i):
        return load_frame(self.frames[i])

    @property
    def period_ms(self):
        return 1000.0 / self.rate_hz


def load_frame(ref):
    if isinstance(ref, np.ndarray):
        return ref
    return read_png(ref)


def nearest_indices(query_ts, ref_ts):
    """Index into ``ref_ts`` of the nearest timestamp for each query.

    Ties go to the earlier reference frame.  ``ref_ts`` must be sorted and
    non-empty.
    """
    ref = np.asarray(ref_ts, dtype=np.int64)
    q = np.asarray(query_ts, dtype=np.int64)
    if len(ref) == 0:
        raise ValueError("reference stream is empty")
    right = np.searchsorted(ref, q, side="left")
    right = np.clip(right, 0, len(ref) - 1)
    left = np.clip(right - 1, 0, len(ref) - 1)
    d_left = np.abs(q - ref[left])
    d_right = np.abs(ref[right] - q)
    return np.where(d_left <= d_right, left, right)


@dataclass
class SyncedSample:
    subject: int
    thermal_ts: int
    thermal: object
    view_ts: dict
    views: dict

    @property
    def max_skew(self):
        return max(abs(int(self.view_ts[v]) - int(self.thermal_ts)) for v in VIEWS)

    def view_frames(self):
        return [load_frame(self.views[v]) for v in VIEWS]

    def thermal_frame(self):
        return load_frame(self.thermal)


def default_tolerance_ms(thermal_rate_hz):
    return 0.5 * 1000.0 / thermal_rate_hz


def _streams_by_modality(streams):
    if isinstance(streams, dict):
        by = dict(streams)
    else:
        by = {s.modality: s for s in streams}
    missing = [m for m in MODALITIES if m not in by]
    if missing:
        raise ValueError(f"missing streams: {missing}")
    return by


def synchronize(streams, tolerance_ms=None, subject=0):
    """Pair each thermal frame with the nearest frame of every RGB view.

    Thermal frames whose nearest frame in any view lies farther than
    ``tolerance_ms`` are dropped.  The default tolerance is half the
    thermal period.
    """
    by = _streams_by_modality(streams)
    thermal = by["thermal"]
    if tolerance_ms is None:
        tolerance_ms = default_tolerance_ms(thermal.rate_hz)
    if tolerance_ms <= 0:
        raise ValueError("tolerance must be positive")
    if len(thermal) == 0:
        return []
    picks = {}
    for v in VIEWS:
        s = by[v]
        if len(s) == 0:
            return []
        picks[v] = nearest_indices(thermal.timestamps, s.timestamps)
    out = []
    for i, t in enumerate(thermal.timestamps):
        t = int(t)
        view_ts = {v: int(by[v].timestamps[picks[v][i]]) for v in VIEWS}
        if any(abs(ts - t) > tolerance_ms for ts in view_ts.values()):
            continue
        out.append(
            SyncedSample(
                subject=subject,
                thermal_ts=t,
                thermal=thermal.frames[i] if thermal.frames else None,
                view_ts=view_ts,
                views={v: (by[v].frames[picks[v][i]] if by[v].frames else None) for v in VIEWS},
            )
        )
    return out


# ---------------------------------------------------------------- collages


def _as_view_list(views):
    if isinstance(views, SyncedSample):
        return views.view_frames()
    if isinstance(views, dict):
        return [views[v] for v in VIEWS]
    return list(views)


def compose_collage(views, style):
    """Pack the four views (front, overhead, profile, tablet) into one image.

    Arrays are (H, W[, C]).  Front keeps only the front view, tessellated
    is a row-major 2x2 grid, stacked is a vertical strip.
    """
    style = InputStyle.parse(style)
    vs = _as_view_list(views)
    if len(vs) != 4:
        raise ContractError(f"need four views, got {len(vs)}")
    shape = vs[0].shape
    for name, v in zip(VIEWS, vs):
        if v.shape != shape:
            raise ContractError(f"view {name} has extent {v.shape}, expected {shape}")
    if shape[0] != shape[1]:
        raise ContractError(f"views must be square, got {shape}")
    if style is InputStyle.FRONT:
        return vs[0].copy()
    if style is InputStyle.TESSELLATED:
        top = np.concatenate([vs[0], vs[1]], axis=1)
        bottom = np.concatenate([vs[2], vs[3]], axis=1)
        return np.concatenate([top, bottom], axis=0)
    return np.concatenate(vs, axis=0)


def decompose_collage(image, style):
    """Inverse of :func:`compose_collage` for the four-view styles."""
    style = InputStyle.parse(style)
    if style is InputStyle.FRONT:
        raise ContractError("a front-view image carries only one view")
    H, W = image.shape[:2]
    if style is InputStyle.TESSELLATED:
        if H != W or H % 2:
            raise ContractError(f"tessellated collage must be 2S x 2S, got {image.shape}")
        s = H // 2
        return [image[:s, :s].copy(), image[:s, s:].copy(), image[s:, :s].copy(), image[s:, s:].copy()]
    if H != 4 * W:
        raise ContractError(f"stacked collage must be 4S x S, got {image.shape}")
    return [image[i * W : (i + 1) * W].copy() for i in range(4)]


def area_resize(image, out_h, out_w):
    """Block-mean downsampling by integer factors; float64 output."""
    H, W = image.shape[:2]
    if H % out_h or W % out_w:
        raise ContractError(f"cannot area-resize {image.shape[:2]} to {(out_h, out_w)}")
    fh, fw = H // out_h, W // out_w
    img = np.asarray(image, dtype=np.float64)
    if fh == 1 and fw == 1:
        return img
    rest = img.shape[2:]
    return img.reshape(out_h, fh, out_w, fw, *rest).mean(axis=(1, 3))


def network_input(views, style, side):
    """Collage -> (3, side, side) float32 in [-1, 1]."""
    collage = compose_collage(views, style)
    img = area_resize(collage, side, side) / 127.5 - 1.0
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def thermal_target(frame, side=None):
    """8-bit thermal frame -> (1, side, side) float32 in [-1, 1]."""
    f = np.asarray(frame)
    if side is not None and f.shape[0] != side:
        f = area_resize(f, side, side)
    return (np.asarray(f, dtype=np.float32) / np.float32(127.5) - np.float32(1.0))[None]


# ---------------------------------------------------------------- images


def read_png(path):
    with Image.open(path) as im:
        return np.array(im)


def write_png(path, array):
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {arr.dtype}")
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG", compress_level=1)


def frame_relpath(subject, modality, index, ts):
    return f"subject_{subject:02d}/{modality}/{index:06d}_ts{int(ts)}.png"


# ---------------------------------------------------------------- manifests

_HEADER = ["subject", "thermal_path", "thermal_ts"] + [f"{v}_{k}" for v in VIEWS for k in ("path", "ts")]
SPLITS = ("unsplit", "train", "val", "test")


@dataclass
class DatasetManifest:
    root: str
    samples: list
    split: str = "unsplit"
    seed: int = -1

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split tag {self.split!r}")

    def __len__(self):
        return len(self.samples)

    def subjects(self):
        return sorted({s.subject for s in self.samples})

    def for_subject(self, subject):
        return replace(self, samples=[s for s in self.samples if s.subject == subject])

    def key(self, sample):
        return (sample.subject, sample.thermal_ts)

    def resolve(self, ref):
        return ref if os.path.isabs(ref) else os.path.join(self.root, ref)

    def absolute(self):
        """Copy whose frame references are absolute paths."""
        out = []
        for s in self.samples:
            out.append(
                replace(
                    s,
                    thermal=self.resolve(s.thermal),
                    views={v: self.resolve(p) for v, p in s.views.items()},
                )
            )
        return replace(self, samples=out)

    def check_files(self):
        missing = []
        for s in self.samples:
            for ref in [s.thermal, *s.views.values()]:
                if not os.path.exists(self.resolve(ref)):
                    missing.append(ref)
        if missing:
            raise FileNotFoundError(f"{len(missing)} manifest files missing, e.g. {missing[0]}")

    def to_text(self):
        lines = ["# thermalgan manifest v1", f"# split={self.split} seed={self.seed}", "\t".join(_HEADER)]
        for s in self.samples:
            row = [str(s.subject), str(s.thermal), str(s.thermal_ts)]
            for v in VIEWS:
                row += [str(s.views[v]), str(s.view_ts[v])]
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())
        return path

    @classmethod
    def read(cls, path, root=None):
        split, seed = "unsplit", -1
        samples = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    for tok in line[1:].split():
                        k, _, v = tok.partition("=")
                        if k == "split":
                            split = v
                        elif k == "seed":
                            seed = int(v)
                    continue
                cols = line.split("\t")
                if cols[0] == "subject":
                    continue
                if len(cols) != len(_HEADER):
                    raise ValueError(f"{path}:{lineno}: expected {len(_HEADER)} columns, got {len(cols)}")
                samples.append(
                    SyncedSample(
                        subject=int(cols[0]),
                        thermal=cols[1],
                        thermal_ts=int(cols[2]),
                        views={v: cols[3 + 2 * i] for i, v in enumerate(VIEWS)},
                        view_ts={v: int(cols[4 + 2 * i]) for i, v in enumerate(VIEWS)},
                    )
                )
        if root is None:
            root = os.path.dirname(os.path.abspath(path))
        return cls(root=root, samples=samples, split=split, seed=seed)


def _partition_sizes(n, ratios):
    sizes = [math.floor(n * r) for r in ratios[1:]]
    return [n - sum(sizes)] + sizes


def split(manifest, ratios=(0.8, 0.1, 0.1), seed=0):
    """Seeded shuffle then contiguous (train, val, test) partition.

    Val and test sizes are floored; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    order = RngSeed(seed, 1).generator().permutation(n)
    sizes = _partition_sizes(n, ratios)
    parts = []
    start = 0
    for tag, size in zip(("train", "val", "test"), sizes):
        idx = order[start : start + size]
        start += size
        parts.append(replace(manifest, samples=[manifest.samples[i] for i in idx], split=tag, seed=seed))
    return tuple(parts)


def split_by_subject(manifest, ratios=(0.8, 0.1, 0.1), seed=0):
    """Split each subject's samples separately and concatenate per split."""
    acc = {"train": [], "val": [], "test": []}
    for subj in manifest.subjects():
        for part in split(manifest.for_subject(subj), ratios, seed):
            acc[part.split].extend(part.samples)
    return tuple(replace(manifest, samples=acc[t], split=t, seed=seed) for t in ("train", "val", "test"))


def subsample(manifests, n, seed=0):
    """Uniform seeded draw of ``n`` samples without replacement from the pooled manifests.

    Drawn samples keep their pool order.
    """
    if isinstance(manifests, DatasetManifest):
        manifests = [manifests]
    pool = [s for m in manifests for s in m.samples]
    if n > len(pool) or n < 0:
        raise ContractError(f"cannot draw {n} samples from a pool of {len(pool)}")
    idx = np.sort(RngSeed(seed, 2).generator().choice(len(pool), size=n, replace=False))
    base = manifests[0]
    return replace(base, samples=[pool[i] for i in idx], seed=seed)


# ---------------------------------------------------------------- stream index


def write_stream_index(path, rows):
    """``rows``: iterable of (subject, modality, index, ts, relpath)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("# thermalgan streams v1\nsubject\tmodality\tindex\tts\tpath\trate_hz\n")
        for subject, modality, index, ts, rel, rate in rows:
            f.write(f"{subject}\t{modality}\t{index}\t{int(ts)}\t{rel}\t{rate:g}\n")


def read_stream_index(path, subject=None):
    """Return {subject: {modality: FrameStream}} with absolute frame paths."""
    root = os.path.dirname(os.path.abspath(path))
    acc = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("#") or line.startswith("subject\t") or not line.strip():
                continue
            subj, modality, _, ts, rel, rate = line.rstrip("\n").split("\t")
            subj = int(subj)
            if subject is not None and subj != subject:
                continue
            d = acc.setdefault(subj, {}).setdefault(modality, {"ts": [], "frames": [], "rate": float(rate)})
            d["ts"].append(int(ts))
            d["frames"].append(os.path.join(root, rel))
    return {
        subj: {m: FrameStream(m, d["rate"], d["ts"], d["frames"]) for m, d in mods.items()}
        for subj, mods in acc.items()
    }


# ---------------------------------------------------------------- training arrays


@dataclass
class PairedData:
    conditions: np.ndarray  # (N, 3, S, S) in [-1, 1]
    targets: np.ndarray  # (N, 1, S, S) in [-1, 1]
    subjects: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return len(self.targets)

    def subset(self, mask):
        return PairedData(self.conditions[mask], self.targets[mask], self.subjects[mask], self.timestamps[mask])


def load_pairs(manifest, style, side):
    """Materialize a manifest as network-ready arrays."""
    style = InputStyle.parse(style)
    n = len(manifest)
    conds = np.empty((n, 3, side, side), dtype=np.float32)
    tgts = np.empty((n, 1, side, side), dtype=np.float32)
    for i, s in enumerate(manifest.samples):
        views = [read_png(manifest.resolve(s.views[v])) for v in VIEWS]
        conds[i] = network_input(views, style, side)
        tgts[i] = thermal_target(read_png(manifest.resolve(s.thermal)), side)
    subjects = np.array([s.subject for s in manifest.samples], dtype=np.int64)
    ts = np.array([s.thermal_ts for s in manifest.samples], dtype=np.int64)
    return PairedData(conds, tgts, subjects, ts)
