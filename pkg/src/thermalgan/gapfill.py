"""Pseudo-complete thermal streams at the RGB frame rate.

A low-rate thermal camera leaves most RGB instants without a thermal
measurement.  ``detect_gaps`` finds those instants, ``fill_gaps`` fills
them with generator output on the RGB views (copying real frames
everywhere else), and ``baseline_fill`` provides the hold-last and linear
fillers used as reference points.
"""

import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from .dataio import VIEWS, FrameStream, InputStyle, area_resize, frame_relpath, nearest_indices, network_input, write_png
from .tensor import ContractError
from .train import to_uint8

REAL = "real"
SYNTHETIC = "synthetic"
PROVENANCE_NAME = "provenance.tsv"


class StyleMismatchError(ContractError):
    """The generator was trained on a different input style."""


def default_gap_threshold_ms(rgb_rate_hz):
    """Half the RGB period: only a thermal frame captured at the same RGB instant counts as present."""
    return 0.5 * 1000.0 / rgb_rate_hz


@dataclass
class GapReport:
    rgb_ts: np.ndarray
    thermal_ts: np.ndarray  # nearest thermal timestamp, -1 when there is no thermal frame at all
    thermal_index: np.ndarray
    skew_ms: np.ndarray
    is_gap: np.ndarray
    threshold_ms: float

    def __len__(self):
        return len(self.rgb_ts)

    @property
    def n_gaps(self):
        return int(np.count_nonzero(self.is_gap))

    def rows(self):
        for i in range(len(self)):
            yield int(self.rgb_ts[i]), int(self.thermal_ts[i]), float(self.skew_ms[i]), bool(self.is_gap[i])


def detect_gaps(rgb_stream, thermal_stream, threshold_ms=None):
    """Flag every RGB timestamp whose nearest thermal frame is more than ``threshold_ms`` away."""
    if threshold_ms is None:
        threshold_ms = default_gap_threshold_ms(rgb_stream.rate_hz)
    if threshold_ms < 0:
        raise ValueError("gap threshold must be non-negative")
    rgb_ts = np.asarray(rgb_stream.timestamps, dtype=np.int64)
    n = len(rgb_ts)
    if n == 0 or len(thermal_stream) == 0:
        return GapReport(
            rgb_ts,
            np.full(n, -1, dtype=np.int64),
            np.full(n, -1, dtype=np.int64),
            np.full(n, np.inf),
            np.ones(n, dtype=bool),
            float(threshold_ms),
        )
    idx = nearest_indices(rgb_ts, thermal_stream.timestamps)
    th_ts = thermal_stream.timestamps[idx]
    skew = np.abs(rgb_ts - th_ts).astype(np.float64)
    return GapReport(rgb_ts, th_ts, idx.astype(np.int64), skew, skew > threshold_ms, float(threshold_ms))


@dataclass
class PseudoCompleteStream:
    timestamps: np.ndarray
    frames: list  # uint8 thermal frames, one per timestamp
    provenance: list  # REAL or SYNTHETIC per timestamp
    skew_ms: np.ndarray
    checkpoint_digest: str = ""
    style: str = ""
    method: str = "generator"
    fallback: list = field(default_factory=list)  # timestamps where linear fell back to hold-last

    def __len__(self):
        return len(self.timestamps)

    def synthetic_mask(self):
        return np.array([p == SYNTHETIC for p in self.provenance], dtype=bool)

    def as_stream(self, rate_hz):
        return FrameStream("thermal", rate_hz, self.timestamps, list(self.frames))


def _generator_style(generator):
    config = getattr(generator, "config", None)
    if config is None:
        raise TypeError("generator must be a trainer or a checkpoint path")
    return InputStyle.parse(config.style)


def _match_side(frame, side):
    """Bring a generated (s, s) frame to the thermal stream's resolution."""
    s = frame.shape[0]
    if s == side:
        return frame
    if side % s == 0:
        f = side // s
        return np.repeat(np.repeat(frame, f, axis=0), f, axis=1)
    return area_resize(frame, side, side)


def fill_gaps(view_streams, thermal_stream, gap_report, generator, style, batch_size=32):
    """Thermal frame for every RGB timestamp in ``gap_report``.

    ``view_streams`` maps each RGB view to its FrameStream.  Non-gap
    timestamps copy the nearest real thermal frame; gap timestamps get the
    generator's output on that instant's collage.  ``generator`` is a
    trainer or a checkpoint path; its training style must equal ``style``.
    """
    from .checkpoint import checkpoint_digest, load_checkpoint

    style = InputStyle.parse(style)
    digest = ""
    if isinstance(generator, (str, os.PathLike)):
        digest = checkpoint_digest(generator)
        generator = load_checkpoint(generator)
    trained = _generator_style(generator)
    if trained != style:
        raise StyleMismatchError(f"generator was trained on {trained.value!r} inputs, asked to fill with {style.value!r}")
    side = generator.config.image_side

    n = len(gap_report)
    frames = [None] * n
    provenance = [None] * n
    for i in range(n):
        if not gap_report.is_gap[i]:
            # copy, never re-encode: real frames stay bit-identical to the source
            frames[i] = np.array(thermal_stream.frame(int(gap_report.thermal_index[i])), copy=True)
            provenance[i] = REAL

    gaps = np.flatnonzero(gap_report.is_gap)
    if len(gaps):
        picks = {v: nearest_indices(gap_report.rgb_ts[gaps], view_streams[v].timestamps) for v in VIEWS}
        out_side = None
        if len(thermal_stream):
            out_side = thermal_stream.frame(0).shape[0]
        for start in range(0, len(gaps), batch_size):
            chunk = range(start, min(start + batch_size, len(gaps)))
            cond = np.stack(
                [network_input([view_streams[v].frame(int(picks[v][j])) for v in VIEWS], style, side) for j in chunk]
            )
            out = to_uint8(generator.generate(cond)[:, 0])
            for j, img in zip(chunk, out):
                i = gaps[j]
                frames[i] = _match_side(img, out_side or img.shape[0]).astype(np.uint8)
                provenance[i] = SYNTHETIC

    return PseudoCompleteStream(
        timestamps=np.array(gap_report.rgb_ts, dtype=np.int64),
        frames=frames,
        provenance=provenance,
        skew_ms=np.array(gap_report.skew_ms, dtype=np.float64),
        checkpoint_digest=digest,
        style=style.value,
        method="generator",
    )


def baseline_fill(thermal_stream, rgb_timestamps, method="hold_last"):
    """Fill every requested timestamp from real thermal frames alone.

    ``hold_last`` repeats the latest frame at or before the timestamp.
    ``linear`` blends the two bracketing frames by temporal weight in
    normalized pixel space and falls back to hold-last (recorded in
    ``fallback``) when no later frame exists.  Timestamps that coincide
    with a real frame copy it and are tagged real.
    """
    if method not in ("hold_last", "linear"):
        raise ValueError(f"unknown baseline {method!r}")
    ts = np.asarray(rgb_timestamps, dtype=np.int64)
    th = thermal_stream.timestamps
    if len(ts) and (len(th) == 0 or ts[0] < th[0]):
        raise ContractError("baseline filling needs a thermal frame at or before the first requested timestamp")
    prev = np.searchsorted(th, ts, side="right") - 1
    frames, provenance, fallback = [], [], []
    skew = np.empty(len(ts))
    cache = {}

    def frame(k):
        if k not in cache:
            cache[k] = thermal_stream.frame(k)
        return cache[k]

    for i, t in enumerate(ts):
        p = int(prev[i])
        skew[i] = t - th[p]
        if th[p] == t:
            frames.append(np.array(frame(p), copy=True))
            provenance.append(REAL)
            continue
        provenance.append(SYNTHETIC)
        if method == "linear" and p + 1 < len(th):
            w = (t - th[p]) / float(th[p + 1] - th[p])
            a = frame(p).astype(np.float64) / 255.0
            b = frame(p + 1).astype(np.float64) / 255.0
            frames.append(np.rint(((1.0 - w) * a + w * b) * 255.0).astype(np.uint8))
            skew[i] = min(t - th[p], th[p + 1] - t)
        else:
            if method == "linear":
                fallback.append(int(t))
            frames.append(np.array(frame(p), copy=True))
    return PseudoCompleteStream(ts, frames, provenance, skew, method=method, fallback=fallback)


def synthetic_l1(stream, truth_frames, mask=None):
    """Mean L1 in [0, 1] pixel space over the selected timestamps (default: synthetic ones)."""
    if mask is None:
        mask = stream.synthetic_mask()
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ValueError("no timestamps selected")
    errs = [
        np.mean(np.abs(stream.frames[i].astype(np.float64) - np.asarray(truth_frames[i], dtype=np.float64))) / 255.0
        for i in idx
    ]
    return float(np.mean(errs))


def write_pseudo_complete(stream, out_dir, subject=0):
    """Write frames in the dataset layout plus provenance.tsv; returns the provenance path.

    A failed write removes the subject directory it created.
    """
    subj_dir = os.path.join(out_dir, f"subject_{subject:02d}")
    created = not os.path.exists(subj_dir)
    try:
        os.makedirs(os.path.join(subj_dir, "thermal"), exist_ok=True)
        lines = ["# thermalgan provenance v1", "timestamp\tsource\tskew_ms\tcheckpoint_digest\tpath"]
        for i, (t, img) in enumerate(zip(stream.timestamps, stream.frames)):
            rel = frame_relpath(subject, "thermal", i, t)
            write_png(os.path.join(out_dir, rel), img)
            lines.append(f"{int(t)}\t{stream.provenance[i]}\t{stream.skew_ms[i]:g}\t{stream.checkpoint_digest}\t{rel}")
        path = os.path.join(subj_dir, PROVENANCE_NAME)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return path
    except BaseException:
        if created:
            shutil.rmtree(subj_dir, ignore_errors=True)
        raise


def read_provenance(path):
    """(timestamps, sources, skews, digests) from a provenance.tsv."""
    ts, src, skew, dig = [], [], [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("#") or line.startswith("timestamp\t") or not line.strip():
                continue
            t, s, k, d, _ = line.rstrip("\n").split("\t")
            ts.append(int(t))
            src.append(s)
            skew.append(float(k))
            dig.append(d)
    return np.array(ts, dtype=np.int64), src, np.array(skew), dig
