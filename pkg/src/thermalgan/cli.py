"""Command-line entry point.

Every command takes an optional ``--config`` file of ``key=value`` lines;
flags given on the command line override it.  Outputs are staged in a
sibling directory and moved into ``--out`` only when the command
succeeds, so an aborted run leaves nothing half-written.  Each run also
writes ``run.json`` (inputs, seed, version) and ``run_config.txt``, which
can be passed back through ``--config`` to repeat the run.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 a comparison ordering was not reproduced.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import subprocess
import sys
import tempfile
from dataclasses import fields, replace

import numpy as np

from . import __version__, kernels
from .models import ConfigError
from .serialize import FormatError
from .tensor import ContractError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_ASSERT = 0, 1, 2, 3

log = logging.getLogger("thermalgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config


def read_config_file(path):
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value, kind):
    if kind is bool:
        return value.lower() in ("1", "true", "yes")
    return kind(value)


def resolve_options(args, keys):
    """Merge defaults < config file < explicit flags for the given ``keys`` ({name: (type, default)})."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_values) - set(keys)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    opts = {}
    for name, (kind, default) in keys.items():
        flag = getattr(args, name, None)
        if flag is not None:
            opts[name] = flag
        elif name in file_values:
            try:
                opts[name] = _coerce(file_values[name], kind)
            except ValueError:
                raise UsageError(f"config key {name}: cannot parse {file_values[name]!r}") from None
        else:
            opts[name] = default
    return opts


def _train_keys():
    from .train import TrainConfig

    keys = {}
    base = TrainConfig()
    for f in fields(TrainConfig):
        if f.name == "weights":
            continue
        keys[f.name] = (type(getattr(base, f.name)), getattr(base, f.name))
    keys.update(
        lambda_l1=(float, base.weights.lambda_l1),
        lambda_cycle=(float, base.weights.lambda_cycle),
        adversarial=(str, base.weights.adversarial),
    )
    return keys


def train_config_from(opts):
    from .train import LossWeights, TrainConfig

    weights = LossWeights(opts["lambda_l1"], opts["lambda_cycle"], opts["adversarial"])
    kw = {f.name: opts[f.name] for f in fields(TrainConfig) if f.name != "weights"}
    return TrainConfig(weights=weights, **kw)


def _scene_keys():
    from .synthscene import SceneConfig

    base = SceneConfig()
    return {f.name: (type(getattr(base, f.name)), getattr(base, f.name)) for f in fields(SceneConfig)}


# ---------------------------------------------------------------- run bookkeeping


def git_version():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=10, check=True,
        )
        return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir, command, argv, opts, inputs, extra=None):
    """``opts`` go to both files; ``extra`` values (e.g. repeatable flags) only to run.json."""
    record = {
        "command": command,
        "argv": list(argv),
        "options": {**opts, **(extra or {})},
        "seed": opts.get("seed"),
        "inputs": {name: {"path": os.path.abspath(p), "sha256": _file_digest(p)} for name, p in inputs.items()},
        "version": git_version(),
        "backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    with open(os.path.join(out_dir, "run_config.txt"), "w", encoding="utf-8", newline="\n") as f:
        for k in sorted(opts):
            f.write(f"{k}={opts[k]}\n")


class Staging:
    """Write into a temporary sibling of ``out`` and move the results in on success."""

    def __init__(self, out):
        self.out = os.path.abspath(out)

    def __enter__(self):
        parent = os.path.dirname(self.out)
        os.makedirs(parent, exist_ok=True)
        self.path = tempfile.mkdtemp(prefix=os.path.basename(self.out) + ".partial-", dir=parent)
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.path, ignore_errors=True)
            return False
        os.makedirs(self.out, exist_ok=True)
        for name in os.listdir(self.path):
            dst = os.path.join(self.out, name)
            if os.path.isdir(dst) and not os.path.islink(dst):
                shutil.rmtree(dst)
            elif os.path.exists(dst):
                os.remove(dst)
            os.replace(os.path.join(self.path, name), dst)
        os.rmdir(self.path)
        return False


# ---------------------------------------------------------------- commands


def _manifest_path(path):
    from .dataio import MANIFEST_NAME

    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    return path


def _select(manifest, part, split_seed, subjects):
    from .dataio import split_by_subject

    if subjects:
        keep = set(subjects)
        manifest = replace(manifest, samples=[s for s in manifest.samples if s.subject in keep])
        if not manifest.samples:
            raise ContractError(f"no samples for subjects {sorted(keep)}")
    if part == "all" or manifest.split != "unsplit":
        return manifest
    train, val, test = split_by_subject(manifest, seed=split_seed)
    return {"train": train, "val": val, "test": test}[part]


def cmd_synth_data(args, argv):
    from .synthscene import SceneConfig, generate_dataset

    opts = resolve_options(args, _scene_keys())
    config = SceneConfig(**opts)
    with Staging(args.out) as stage:
        manifest = generate_dataset(config, stage)
        write_run_manifest(stage, "synth-data", argv, opts, {})
    print(f"wrote {len(manifest)} synced samples for {config.n_subjects} subjects to {args.out}")
    return EXIT_OK


def _train_run_keys():
    keys = _train_keys()
    keys.update(
        iterations=(int, 5000),
        snapshots=(str, "none"),
        split_seed=(int, 0),
        log_every=(int, 0),
    )
    return keys


def cmd_train(args, argv):
    from .checkpoint import save_checkpoint
    from .dataio import DatasetManifest, InputStyle, load_pairs
    from .train import SnapshotSchedule, make_trainer, train

    opts = resolve_options(args, _train_run_keys())
    opts["style"] = InputStyle.parse(opts["style"]).value
    config = train_config_from(opts)
    schedule = SnapshotSchedule.parse(opts["snapshots"])
    mpath = _manifest_path(args.data)
    manifest = _select(DatasetManifest.read(mpath), "train", opts["split_seed"], args.subject)
    data = load_pairs(manifest, config.style, config.image_side)
    with Staging(args.out) as stage:
        state = make_trainer(config)
        history = train(
            state, data, opts["iterations"], schedule=schedule,
            snapshot_dir=os.path.join(stage, "snapshots"), log_every=opts["log_every"],
        )
        save_checkpoint(state, os.path.join(stage, "checkpoint.tgck"))
        if history:
            names = list(history[0])
            with open(os.path.join(stage, "losses.tsv"), "w", encoding="utf-8", newline="\n") as f:
                f.write("iteration\t" + "\t".join(names) + "\n")
                for i, rec in enumerate(history, 1):
                    f.write(f"{i}\t" + "\t".join(f"{rec[n]:.6g}" for n in names) + "\n")
        write_run_manifest(stage, "train", argv, opts, {"manifest": mpath}, {"subject": args.subject})
    print(f"trained {config.arch}/{config.style} for {opts['iterations']} iterations -> {args.out}/checkpoint.tgck")
    return EXIT_OK


def cmd_evaluate(args, argv):
    from .dataio import DatasetManifest
    from .evaluation import evaluate, evaluate_saved

    opts = resolve_options(args, {"split_seed": (int, 0), "split": (str, "test"), "style": (str, "")})
    if (args.checkpoint is None) == (args.predictions is None):
        raise UsageError("evaluate needs exactly one of --checkpoint or --predictions")
    mpath = _manifest_path(args.data)
    manifest = _select(DatasetManifest.read(mpath), opts["split"], opts["split_seed"], args.subject)
    inputs = {"manifest": mpath}
    with Staging(args.out) as stage:
        if args.checkpoint:
            inputs["checkpoint"] = args.checkpoint
            save = os.path.join(stage, "outputs") if args.save_outputs else None
            report = evaluate(args.checkpoint, manifest, opts["style"] or None, save_dir=save)
        else:
            report = evaluate_saved(args.predictions, manifest)
        with open(os.path.join(stage, "report.txt"), "w", encoding="utf-8", newline="\n") as f:
            f.write(report.to_text())
        report.write_samples(os.path.join(stage, "samples.tsv"))
        write_run_manifest(stage, "evaluate", argv, opts, inputs)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_fill_gaps(args, argv):
    from .checkpoint import load_checkpoint
    from .dataio import STREAMS_NAME, read_stream_index
    from .gapfill import baseline_fill, default_gap_threshold_ms, detect_gaps, fill_gaps, synthetic_l1, write_pseudo_complete

    opts = resolve_options(args, {"threshold_ms": (float, -1.0), "style": (str, ""), "baseline": (str, "")})
    spath = args.streams
    if os.path.isdir(spath):
        spath = os.path.join(spath, STREAMS_NAME)
    if not os.path.exists(spath):
        raise FileNotFoundError(f"stream index not found: {spath}")
    streams = read_stream_index(spath, args.subject).get(args.subject)
    if not streams:
        raise ContractError(f"subject {args.subject} not in {spath}")
    rgb = streams["front"]
    threshold = opts["threshold_ms"] if opts["threshold_ms"] >= 0 else default_gap_threshold_ms(rgb.rate_hz)
    inputs = {"streams": spath}
    if opts["baseline"]:
        result = baseline_fill(streams["thermal"], rgb.timestamps, opts["baseline"])
    else:
        if not args.checkpoint:
            raise UsageError("fill-gaps needs --checkpoint unless --baseline is given")
        inputs["checkpoint"] = args.checkpoint
        state = load_checkpoint(args.checkpoint)
        style = opts["style"] or state.config.style
        report = detect_gaps(rgb, streams["thermal"], threshold)
        result = fill_gaps(streams, streams["thermal"], report, args.checkpoint, style)
    with Staging(args.out) as stage:
        write_pseudo_complete(result, stage, args.subject)
        opts["threshold_ms"] = threshold
        write_run_manifest(stage, "fill-gaps", argv, opts, inputs, {"subject": args.subject})
    n_syn = int(result.synthetic_mask().sum())
    print(f"{len(result)} frames ({len(result) - n_syn} real, {n_syn} synthetic) -> {args.out}")
    truth = _ground_truth(os.path.dirname(os.path.abspath(spath)), args.subject, result.timestamps)
    if truth is not None and n_syn:
        print(f"synthetic-frame L1 vs scene ground truth: {synthetic_l1(result, truth):.4f}")
    return EXIT_OK


def _ground_truth(root, subject, timestamps):
    from .synthscene import ground_truth_thermal, read_scene_config

    if not os.path.exists(os.path.join(root, "scene_config.txt")):
        return None
    return ground_truth_thermal(read_scene_config(root), subject, timestamps)


def cmd_compare(args, argv):
    from .evaluation import COMPARISONS, write_table

    keys = _train_keys()
    keys.update(
        iterations=(int, 5000), split_seed=(int, 0), subjects=(int, 4), seeds=(int, 3),
        parallel=(int, 1), first_seed=(int, 0),
    )
    opts = resolve_options(args, keys)
    config = train_config_from(opts)
    mpath = _manifest_path(args.data)
    seeds = list(range(opts["first_seed"], opts["first_seed"] + opts["seeds"]))
    fn = COMPARISONS[args.experiment]
    with Staging(args.out) as stage:
        table = fn(
            mpath, seeds, config, opts["iterations"], subjects=opts["subjects"],
            split_seed=opts["split_seed"], parallel=opts["parallel"],
        )
        write_table(table, stage)
        write_run_manifest(stage, "compare", argv, opts, {"manifest": mpath}, {"experiment": args.experiment})
    print(table.to_text(), end="")
    return EXIT_OK if table.passed else EXIT_ASSERT


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="thermalgan", description="RGB to thermal translation with conditional GANs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("synth-data", help="render the synthetic multi-view dataset")
    common(sp)
    sp.add_argument("--n-subjects", dest="n_subjects", type=int)
    sp.add_argument("--samples", dest="samples_per_subject", type=int)
    sp.add_argument("--side", dest="image_side", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--thermal-rate", dest="thermal_rate", type=float)
    sp.add_argument("--rgb-rate", dest="rgb_rate", type=float)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="train a generator on a manifest's train split")
    common(sp)
    sp.add_argument("--data", required=True, help="manifest file or dataset directory")
    sp.add_argument("--style", choices=["front", "tessellated", "stacked"])
    sp.add_argument("--arch", choices=["pix2pix", "cyclegan"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--snapshots", help="'early' (every 10 up to 60, plus the end) or every=N,until=M,at=A+B")
    sp.add_argument("--side", dest="image_side", type=int)
    sp.add_argument("--width", dest="base_width", type=int)
    sp.add_argument("--split-seed", dest="split_seed", type=int)
    sp.add_argument("--subject", type=int, action="append", help="restrict to a subject (repeatable)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="L1 report of a checkpoint (or saved outputs) on a test split")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions", help="directory of 8-bit thermal frames laid out like the dataset")
    sp.add_argument("--style")
    sp.add_argument("--split", choices=["train", "val", "test", "all"])
    sp.add_argument("--split-seed", dest="split_seed", type=int)
    sp.add_argument("--subject", type=int, action="append")
    sp.add_argument("--save-outputs", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("fill-gaps", help="pseudo-complete thermal stream at the RGB rate")
    common(sp)
    sp.add_argument("--streams", required=True, help="streams.tsv or dataset directory")
    sp.add_argument("--subject", type=int, default=0)
    sp.add_argument("--checkpoint")
    sp.add_argument("--style")
    sp.add_argument("--threshold-ms", dest="threshold_ms", type=float)
    sp.add_argument("--baseline", choices=["hold_last", "linear"])
    sp.set_defaults(func=cmd_fill_gaps)

    sp = sub.add_parser("compare", help="seeded comparison table")
    common(sp)
    sp.add_argument("experiment", choices=["arch", "style", "subjects"])
    sp.add_argument("--data", required=True)
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--parallel", type=int)
    sp.add_argument("--side", dest="image_side", type=int)
    sp.add_argument("--width", dest="base_width", type=int)
    sp.add_argument("--split-seed", dest="split_seed", type=int)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args, argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
