"""Test-set L1 scoring and the seeded comparison harness.

Errors are mean absolute differences on thermal pixels mapped to [0, 1].
A report aggregates per-sample errors into per-subject means, then takes
the mean and the population standard deviation across subjects.

The three comparisons (architecture, input style, training population)
train one model per (condition, subject, seed) cell on equal iteration
budgets and score every cell on the same per-subject test splits.  An
ordering verdict is decided per seed and must hold for a majority of
seeds.
"""

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import DatasetManifest, InputStyle, load_pairs, read_png, split_by_subject, subsample
from .tensor import ContractError

log = logging.getLogger(__name__)

# pooled training keeps this fraction of the union of per-subject train splits (5,000 of 8,500 rows)
POOLED_FRACTION = 5000 / 8500

# results measured on the real recordings; printed for context, never asserted
REFERENCE = {
    "arch": [("pix2pix", 0.0676, 0.0106), ("cyclegan", 0.2179, 0.0633)],
    "style": [("front", 0.0676, 0.0106), ("tessellated", 0.0587, 0.0109), ("stacked", 0.0559, 0.0093)],
    "subjects": [("single-subject", 0.0676, 0.0106), ("multi-subject", 0.1116, 0.0186)],
}


class EvaluationError(ValueError):
    """Evaluation inputs are unusable (empty test set, style mismatch)."""


def per_sample_l1(generated, targets):
    """Mean |a - b| per sample for [-1, 1] arrays of shape (N, ...), in [0, 1] units."""
    g = np.asarray(generated, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if g.shape != t.shape:
        raise ContractError(f"generated {g.shape} and target {t.shape} differ")
    return np.abs(g - t).reshape(len(g), -1).mean(axis=1) / 2.0


@dataclass
class EvalReport:
    errors: np.ndarray  # per-sample L1 in [0, 1]
    subjects: np.ndarray
    timestamps: np.ndarray
    config_digest: str = ""
    seed: int = -1
    style: str = ""

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if len(self.errors) == 0:
            raise EvaluationError("no test samples")
        if np.any(self.errors < 0) or np.any(self.errors > 1):
            raise ContractError("per-sample L1 outside [0, 1]")

    @property
    def per_subject(self):
        return {int(s): float(self.errors[self.subjects == s].mean()) for s in np.unique(self.subjects)}

    @property
    def mean(self):
        """Mean of the per-subject means."""
        return float(np.mean(list(self.per_subject.values())))

    @property
    def std(self):
        """Population standard deviation of the per-subject means."""
        return float(np.std(list(self.per_subject.values())))

    def to_text(self):
        lines = [
            f"# style={self.style} seed={self.seed} config={self.config_digest[:16]}",
            "# std is the population standard deviation across per-subject means",
            "subject\tn\tmean_l1",
        ]
        for s, m in self.per_subject.items():
            lines.append(f"{s}\t{int(np.sum(self.subjects == s))}\t{m:.6f}")
        lines.append(f"all\t{len(self.errors)}\t{self.mean:.6f}\tstd={self.std:.6f}")
        return "\n".join(lines) + "\n"

    def write_samples(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("subject\tthermal_ts\tl1\n")
            for s, t, e in zip(self.subjects, self.timestamps, self.errors):
                f.write(f"{int(s)}\t{int(t)}\t{e:.9f}\n")


def _load_state(checkpoint):
    from .checkpoint import load_checkpoint

    if isinstance(checkpoint, (str, os.PathLike)):
        return load_checkpoint(checkpoint)
    return checkpoint


def evaluate(checkpoint, manifest, style=None, batch_size=32, save_dir=None):
    """Score a generator (trainer or checkpoint path) on a test manifest.

    ``style`` defaults to the checkpoint's own and must match it when
    given.  With ``save_dir`` the 8-bit outputs are written in the
    dataset layout so the scores can be recomputed from disk.
    """
    from .train import to_uint8

    state = _load_state(checkpoint)
    trained = InputStyle.parse(state.config.style)
    style = trained if style is None else InputStyle.parse(style)
    if style != trained:
        raise EvaluationError(f"checkpoint was trained on {trained.value!r}, asked to evaluate {style.value!r}")
    if len(manifest) == 0:
        raise EvaluationError("test manifest is empty")
    data = load_pairs(manifest, style, state.config.image_side)
    outs = []
    for start in range(0, len(data), batch_size):
        outs.append(state.generate(data.conditions[start : start + batch_size]))
    out = np.concatenate(outs)
    if save_dir is not None:
        from .dataio import write_png

        for s, img in zip(manifest.samples, out):
            path = os.path.join(save_dir, s.thermal if not os.path.isabs(s.thermal) else os.path.basename(s.thermal))
            os.makedirs(os.path.dirname(path), exist_ok=True)
            write_png(path, to_uint8(img[0]))
    return EvalReport(
        per_sample_l1(out, data.targets), data.subjects, data.timestamps, state.config.digest(), state.config.seed, style.value
    )


def evaluate_saved(pred_root, manifest):
    """Score 8-bit thermal frames already on disk under ``pred_root`` (same relative paths as the manifest)."""
    if len(manifest) == 0:
        raise EvaluationError("test manifest is empty")
    errs = []
    for s in manifest.samples:
        pred = read_png(os.path.join(pred_root, s.thermal)).astype(np.float64)
        truth = read_png(manifest.resolve(s.thermal)).astype(np.float64)
        if pred.shape != truth.shape:
            raise ContractError(f"{s.thermal}: prediction {pred.shape} vs truth {truth.shape}")
        errs.append(np.abs(pred - truth).mean() / 255.0)
    subjects = [s.subject for s in manifest.samples]
    ts = [s.thermal_ts for s in manifest.samples]
    return EvalReport(np.array(errs), subjects, ts, style="saved")


# ---------------------------------------------------------------- comparisons


@dataclass(frozen=True)
class Cell:
    """One training run: a condition trained for one seed on some subjects."""

    condition: str
    config: object  # TrainConfig
    train_subjects: tuple
    eval_subjects: tuple
    pooled: bool = False


@dataclass
class ComparisonRow:
    condition: str
    seed_means: list  # cross-subject mean L1 per seed
    seed_stds: list  # across-subject population std per seed

    @property
    def mean_l1(self):
        return float(np.mean(self.seed_means))

    @property
    def std(self):
        return float(np.mean(self.seed_stds))


@dataclass
class Verdict:
    claim: str
    better: str
    worse: str
    per_seed: list  # bool per seed
    strict: bool = True

    @property
    def passed(self):
        return sum(self.per_seed) * 2 > len(self.per_seed)


@dataclass
class ComparisonTable:
    experiment: str
    rows: list
    verdicts: list
    seeds: list
    subjects: list
    iterations: int
    notes: list = field(default_factory=list)

    def row(self, condition):
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    @property
    def passed(self):
        return all(v.passed for v in self.verdicts)

    def verdict_for(self, condition):
        parts = []
        for v in self.verdicts:
            if condition in (v.better, v.worse):
                parts.append(f"{v.claim}:{'pass' if v.passed else 'fail'}({sum(v.per_seed)}/{len(v.per_seed)})")
        return ";".join(parts)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "mean_l1", "std", "seeds", "verdict"])
        for r in self.rows:
            w.writerow(
                [r.condition, f"{r.mean_l1:.6f}", f"{r.std:.6f}", " ".join(f"{m:.6f}" for m in r.seed_means), self.verdict_for(r.condition)]
            )
        return buf.getvalue()

    def to_text(self):
        lines = [
            f"{self.experiment} comparison: subjects={self.subjects} seeds={self.seeds} iterations={self.iterations}",
            "mean L1 on [0,1] pixels; std = population std across per-subject means, averaged over seeds",
            f"{'condition':<18}{'mean_l1':>10}{'std':>10}   per-seed means",
        ]
        for r in self.rows:
            per = " ".join(f"{m:.4f}" for m in r.seed_means)
            lines.append(f"{r.condition:<18}{r.mean_l1:>10.4f}{r.std:>10.4f}   {per}")
        lines.append("reference values (real dataset, context only):")
        for name, m, s in REFERENCE.get(self.experiment, []):
            lines.append(f"  {name:<16}{m:>10.4f}{s:>10.4f}")
        for v in self.verdicts:
            status = "PASS" if v.passed else "FAIL"
            lines.append(f"{status} {v.claim}: holds in {sum(v.per_seed)} of {len(v.per_seed)} seeds")
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"


def _cell_manifests(manifest_path, cell, split_seed):
    manifest = DatasetManifest.read(manifest_path)
    train_parts, test_parts = [], []
    for s in sorted(set(cell.train_subjects) | set(cell.eval_subjects)):
        tr, _, te = split_by_subject(manifest.for_subject(s), seed=split_seed)
        if s in cell.train_subjects:
            train_parts.append(tr)
        if s in cell.eval_subjects:
            test_parts.append(te)
    if cell.pooled:
        pool = sum(len(m) for m in train_parts)
        train = subsample(train_parts, int(round(pool * POOLED_FRACTION)), seed=cell.config.seed)
    else:
        train = replace(train_parts[0], samples=[x for m in train_parts for x in m.samples])
    test = replace(test_parts[0], samples=[x for m in test_parts for x in m.samples])
    return train, test


def run_cell(manifest_path, cell, iterations, split_seed=0):
    """Train one cell and return its test report."""
    from .train import make_trainer, train

    train_m, test_m = _cell_manifests(manifest_path, cell, split_seed)
    data = load_pairs(train_m, cell.config.style, cell.config.image_side)
    state = make_trainer(cell.config)
    train(state, data, iterations)
    return evaluate(state, test_m)


def _cell_key(manifest_path, cell, iterations, split_seed):
    # the condition label is presentation only; identical training runs share a key
    return (os.path.abspath(manifest_path), cell.config, cell.train_subjects, cell.eval_subjects, cell.pooled, iterations, split_seed)


def _run_cells(manifest_path, cells, iterations, split_seed, parallel, cache=None):
    """Reports for ``cells`` in order; ``cache`` (a dict) reuses runs shared between comparisons."""
    cache = {} if cache is None else cache
    keys = [_cell_key(manifest_path, c, iterations, split_seed) for c in cells]
    pending = [(k, c) for k, c in dict(zip(keys, cells)).items() if k not in cache]
    if parallel > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futs = [(k, pool.submit(run_cell, manifest_path, c, iterations, split_seed)) for k, c in pending]
            for k, f in futs:
                cache[k] = f.result()
    else:
        for k, c in pending:
            log.info("training %s seed=%d subjects=%s", c.condition, c.config.seed, list(c.train_subjects))
            cache[k] = run_cell(manifest_path, c, iterations, split_seed)
    return [cache[k] for k in keys]


def _table(experiment, conditions, cells, reports, seeds, subjects, iterations, claims):
    """Fold per-cell reports into rows: per seed, merge the condition's reports then aggregate across subjects."""
    merged = {}
    for cell, rep in zip(cells, reports):
        merged.setdefault((cell.condition, cell.config.seed), []).append(rep)
    rows = []
    by_cond = {}
    for cond in conditions:
        means, stds = [], []
        for seed in seeds:
            reps = merged[(cond, seed)]
            rep = EvalReport(
                np.concatenate([r.errors for r in reps]),
                np.concatenate([r.subjects for r in reps]),
                np.concatenate([r.timestamps for r in reps]),
                seed=seed,
            )
            means.append(rep.mean)
            stds.append(rep.std)
        row = ComparisonRow(cond, means, stds)
        rows.append(row)
        by_cond[cond] = row
    verdicts = []
    for better, worse, strict in claims:
        op = "<" if strict else "<="
        per_seed = [
            (b < w) if strict else (b <= w)
            for b, w in zip(by_cond[better].seed_means, by_cond[worse].seed_means)
        ]
        verdicts.append(Verdict(f"{better} {op} {worse}", better, worse, per_seed, strict))
    return ComparisonTable(experiment, rows, verdicts, list(seeds), list(subjects), iterations)


def _subjects(manifest_path, subjects):
    available = DatasetManifest.read(manifest_path).subjects()
    if subjects is None:
        return available
    if isinstance(subjects, int):
        if subjects > len(available):
            raise EvaluationError(f"asked for {subjects} subjects, dataset has {len(available)}")
        return available[:subjects]
    missing = set(subjects) - set(available)
    if missing:
        raise EvaluationError(f"subjects {sorted(missing)} not in dataset")
    return list(subjects)


def compare_architectures(manifest_path, seeds, base_config, iterations, subjects=None, split_seed=0, parallel=1, cache=None):
    """pix2pix vs CycleGAN on front-view inputs, one model per subject and seed."""
    subjects = _subjects(manifest_path, subjects)
    conditions = ["pix2pix", "cyclegan"]
    cells = [
        Cell(arch, replace(base_config, arch=arch, style="front", seed=seed), (s,), (s,))
        for seed in seeds
        for arch in conditions
        for s in subjects
    ]
    reports = _run_cells(manifest_path, cells, iterations, split_seed, parallel, cache)
    return _table("arch", conditions, cells, reports, seeds, subjects, iterations, [("pix2pix", "cyclegan", True)])


def compare_styles(manifest_path, seeds, base_config, iterations, subjects=None, split_seed=0, parallel=1, cache=None):
    """pix2pix trained per subject on each of the three input styles."""
    subjects = _subjects(manifest_path, subjects)
    conditions = [s.value for s in InputStyle]
    cells = [
        Cell(style, replace(base_config, arch="pix2pix", style=style, seed=seed), (s,), (s,))
        for seed in seeds
        for style in conditions
        for s in subjects
    ]
    reports = _run_cells(manifest_path, cells, iterations, split_seed, parallel, cache)
    claims = [("stacked", "front", True), ("stacked", "tessellated", False)]
    return _table("style", conditions, cells, reports, seeds, subjects, iterations, claims)


def compare_generalization(manifest_path, seeds, base_config, iterations, subjects=None, split_seed=0, parallel=1, cache=None):
    """Per-subject front-view models vs one model trained on a subsample of every subject's train split."""
    subjects = _subjects(manifest_path, subjects)
    if len(subjects) < 2:
        raise EvaluationError("population comparison needs at least two subjects")
    cells = []
    for seed in seeds:
        cfg = replace(base_config, arch="pix2pix", style="front", seed=seed)
        cells.extend(Cell("single-subject", cfg, (s,), (s,)) for s in subjects)
        cells.append(Cell("multi-subject", cfg, tuple(subjects), tuple(subjects), pooled=True))
    reports = _run_cells(manifest_path, cells, iterations, split_seed, parallel, cache)
    table = _table(
        "subjects", ["single-subject", "multi-subject"], cells, reports, seeds, subjects, iterations,
        [("single-subject", "multi-subject", True)],
    )
    table.notes.append(f"# pooled training set: {POOLED_FRACTION:.4f} of the union of per-subject train splits")
    return table


COMPARISONS = {"arch": compare_architectures, "style": compare_styles, "subjects": compare_generalization}


def write_table(table, out_dir):
    """Write comparison.csv and comparison.txt; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "comparison.csv")
    txt_path = os.path.join(out_dir, "comparison.txt")
    try:
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            f.write(table.to_csv())
        with open(txt_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(table.to_text())
    except OSError:
        for p in (csv_path, txt_path):
            if os.path.exists(p):
                os.remove(p)
        raise
    return csv_path, txt_path
