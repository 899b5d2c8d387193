"""Command-line entry point: ``lapreg {config,synth,train,register,evaluate,plot}``.

Exit codes: 0 success, 1 I/O failure, 2 usage or precondition error,
3 numerical failure. Every command writes one ``run_manifest.json`` into its
output directory. When ``--out`` is omitted the directory is derived from
``$LAPREG_OUT_ROOT`` (default ``runs``) and the hash of the resolved arguments.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ROOT_ENV = "LAPREG_OUT_ROOT"

log = logging.getLogger("lapreg")


class UsageError(Exception):
    """Bad arguments or unmet preconditions (exit code 2)."""


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    config_hash: str
    checkpoint_ids: List[str] = field(default_factory=list)
    output_dir: str = ""
    seed: Optional[int] = None
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, out_dir, name="run_manifest.json"):
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        return path


def config_hash(doc):
    """sha256 of the canonical JSON form; key order and whitespace do not matter."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _resolve_out(args, resolved):
    if args.out:
        return args.out
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return os.path.join(root, f"{args.command}-{config_hash(resolved)[:10]}")


def _require_file(path, what):
    if not path or not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _subject_from_files(image_path, subject_id):
    from .data import Subject, load_volume
    _require_file(image_path, "image")
    return Subject(subject_id, load_volume(image_path))


# --------------------------------------------------------------------------
# commands

def cmd_config(args):
    from .trainer import TrainConfig, save_config, smoke_config
    config = smoke_config() if args.smoke else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
        config.model.seed = args.seed
    os.makedirs(os.path.dirname(os.path.abspath(args.path)), exist_ok=True)
    save_config(config, args.path)
    print(f"wrote {args.path}")
    return None


def cmd_synth(args):
    from .data import split_subjects, synthetic_dataset, write_manifest
    from .model import ModelConfig
    divisor = ModelConfig().divisor
    if args.size % divisor:
        raise UsageError(f"--size must be divisible by {divisor}, got {args.size}")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ratios = _parse_ratios(args.splits)
    resolved = {"seed": args.seed, "n": args.n, "size": args.size, "lesion": args.lesion,
                "ndim": args.ndim, "splits": ratios}
    out = _resolve_out(args, resolved)
    os.makedirs(out, exist_ok=True)
    subjects = synthetic_dataset(args.n, args.seed, args.size, args.lesion, args.ndim)
    by_split = split_subjects(subjects, args.seed, ratios)
    splits = {s.id: name for name, group in by_split.items() for s in group}
    manifest = os.path.join(out, "manifest.json")
    write_manifest(subjects, os.path.join(out, "data"), manifest, args.ndim, splits,
                   meta={"generator": "synthetic", **resolved})
    counts = {name: len(group) // 2 for name, group in by_split.items()}
    print(f"wrote {args.n} pairs to {manifest} (pairs per split: {counts})")
    return out, resolved, [], {"manifest": manifest}


def _parse_ratios(text):
    ratios = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        try:
            ratios[name.strip()] = float(value)
        except ValueError:
            raise UsageError(f"bad --splits entry {part!r}; expected name=weight") from None
    if not ratios or any(v < 0 for v in ratios.values()) or sum(ratios.values()) <= 0:
        raise UsageError("--splits weights must be non-negative with a positive sum")
    return ratios


def _split(subjects, splits, name):
    if not splits:
        return list(subjects)
    return [s for s in subjects if splits.get(s.id) == name]


def _prepare_subjects(subjects, levels):
    from .data import pad_to_pyramid
    return [pad_to_pyramid(s, levels) for s in subjects]


def cmd_train(args):
    from .data import read_manifest
    from .trainer import load_config, train
    _require_file(args.config, "config")
    _require_file(args.data, "data manifest")
    try:
        config = load_config(args.config)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from None
    subjects, splits, doc = read_manifest(args.data)
    if doc["ndim"] != config.model.ndim:
        raise UsageError(f"data is {doc['ndim']}D but the model is configured for {config.model.ndim}D")
    if args.resume:
        _require_file(args.resume, "resume checkpoint")
    train_set = _prepare_subjects(_split(subjects, splits, "train"), config.model.levels)
    val_set = _prepare_subjects(_split(subjects, splits, "val"), config.model.levels) if splits else []
    if not train_set:
        raise UsageError("manifest has no training subjects")
    resolved = {"config": config.to_dict(), "data": os.path.abspath(args.data),
                "resume": args.resume}
    out = _resolve_out(args, resolved)
    L = config.model.latent_levels

    def report(row):
        if row["step"] % args.log_every == 0:
            parts = " ".join(f"{t}=" + ",".join(f"{row[f'{t}_l{l}']:.4f}" for l in range(L))
                             for t in ("kl", "ncc", "reg"))
            print(f"epoch {row['epoch']} step {row['step']} total {row['total']:.5f} {parts}",
                  flush=True)

    model, history = train(config, train_set, out, resume=args.resume, val_subjects=val_set or None,
                           on_step=report)
    for row in history["validation"]:
        print("validation " + json.dumps(row, sort_keys=True))
    from .model import state_fingerprint
    last = os.path.join(out, "checkpoint_last.pt")
    print(f"training done; checkpoint {last}")
    return out, resolved, [state_fingerprint(model)], {
        "config_path": os.path.abspath(args.config), "seed": config.seed,
        "steps": len(history["steps"]), "checkpoint": last}


def cmd_register(args):
    from .data import crop_padding
    from .inference import (export_result, export_uncertainty, register_map,
                            sample_registrations, variance_maps, write_sample_manifest,
                            _write_grid)
    from .model import load_checkpoint
    _require_file(args.checkpoint, "checkpoint")
    if args.samples is not None and args.samples < 2:
        raise UsageError("variance maps need --samples >= 2")
    model, _ = load_checkpoint(args.checkpoint)
    moving = _subject_from_files(args.moving, "moving")
    fixed = _subject_from_files(args.fixed, "fixed")
    for s in (moving, fixed):
        if s.image.ndim != model.config.ndim:
            raise UsageError(f"{s.id} image is {s.image.ndim}D but the checkpoint is {model.config.ndim}D")
    if moving.image.shape != fixed.image.shape:
        raise UsageError(f"moving {moving.image.shape} and fixed {fixed.image.shape} shapes differ")
    pm, pf = _prepare_subjects([moving, fixed], model.config.levels)
    pads = pm.pad

    resolved = {"checkpoint": model.checkpoint_id, "moving": os.path.abspath(args.moving),
                "fixed": os.path.abspath(args.fixed), "samples": args.samples, "seed": args.seed,
                "temperature": args.temperature}
    out = _resolve_out(args, resolved)
    os.makedirs(out, exist_ok=True)
    spacing = fixed.image.spacing

    def crop(result):
        result.phi0 = crop_padding(result.phi0, pads)
        result.f_hat0 = crop_padding(result.f_hat0, pads)
        return result

    _write_grid(moving.image.data, os.path.join(out, "moving"), spacing)
    _write_grid(fixed.image.data, os.path.join(out, "fixed"), spacing)
    result = crop(register_map(model, pm.image, pf.image))
    export_result(result, out, spacing)
    extra = {"mode": "map"}
    if args.samples:
        samples = [crop(s) for s in sample_registrations(model, pm.image, pf.image, args.samples,
                                                         args.seed, args.temperature)]
        sample_dir = os.path.join(out, "samples")
        files = [export_result(s, sample_dir, spacing, prefix=f"sample{i:03d}_")
                 for i, s in enumerate(samples)]
        write_sample_manifest(samples, [[os.path.relpath(p, out) for p in fl] for fl in files],
                              os.path.join(out, "samples.json"))
        maps = variance_maps(samples, args.seed)
        export_uncertainty(maps, out, spacing)
        extra = {"mode": "sample", "n_samples": args.samples,
                 "var_image_range": [float(maps.var_image.min()), float(maps.var_image.max())],
                 "var_field_range": [float(maps.var_field.min()), float(maps.var_field.max())]}
    print(f"registration written to {out}")
    return out, resolved, [model.checkpoint_id], {"seed": args.seed, **extra}


def _default_pairing(subjects):
    from .data import FOLLOW_UP, PRE_OP
    sessions = {s.session for s in subjects}
    return "intra" if sessions <= {PRE_OP, FOLLOW_UP} and sessions else "inter"


def cmd_evaluate(args):
    from .data import crop_padding, make_pairs, read_manifest
    from .inference import register_map, sample_registrations
    from .metrics import evaluate_pair, write_report
    from .model import load_checkpoint
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.data, "data manifest")
    if args.samples is not None and args.samples == 1:
        raise UsageError("calibration needs --samples >= 2 (or 0 to skip sampling)")
    model, _ = load_checkpoint(args.checkpoint)
    subjects, splits, doc = read_manifest(args.data)
    if doc["ndim"] != model.config.ndim:
        raise UsageError(f"data is {doc['ndim']}D but the checkpoint is {model.config.ndim}D")
    test = _split(subjects, splits, args.split)
    if not test:
        raise UsageError(f"manifest has no subjects in split {args.split!r}")
    pairing = args.pairing or _default_pairing(test)
    pairs = make_pairs(test, pairing, seed=args.seed, limit=args.limit)
    if not pairs:
        raise UsageError(f"no {pairing} pairs in split {args.split!r}")
    resolved = {"checkpoint": model.checkpoint_id, "data": os.path.abspath(args.data),
                "split": args.split, "pairing": pairing, "samples": args.samples, "seed": args.seed,
                "limit": args.limit}
    out = _resolve_out(args, resolved)
    os.makedirs(out, exist_ok=True)

    rows = []
    for moving, fixed in pairs:
        pm, pf = _prepare_subjects([moving, fixed], model.config.levels)
        result = register_map(model, pm.image, pf.image)
        result.phi0, result.f_hat0 = crop_padding(result.phi0, pm.pad), crop_padding(result.f_hat0, pm.pad)
        samples = None
        if args.samples:
            samples = sample_registrations(model, pm.image, pf.image, args.samples, args.seed)
            for s in samples:
                s.phi0, s.f_hat0 = crop_padding(s.phi0, pm.pad), crop_padding(s.f_hat0, pm.pad)
        rows.append(evaluate_pair(moving, fixed, result, samples, args.seed))
    summary = write_report(rows, os.path.join(out, "report.csv"), os.path.join(out, "summary.json"))
    header = " | ".join(f"{k}" for k in summary)
    values = " | ".join(summary[k]["formatted"] for k in summary)
    print(f"{len(rows)} pairs\n{header}\n{values}")
    return out, resolved, [model.checkpoint_id], {"seed": args.seed, "n_pairs": len(rows)}


def _load_grid(stem):
    if os.path.isfile(stem + ".npy"):
        return np.load(stem + ".npy")
    if os.path.isfile(stem + ".nii.gz"):
        import nibabel as nib
        data = np.asarray(nib.load(stem + ".nii.gz").dataobj)
        return np.moveaxis(data, -1, 0) if data.ndim == 4 else data
    return None


def _middle_slice(arr, ndim, vector=False):
    if ndim == 2:
        return arr
    if vector:
        return arr[1:, arr.shape[1] // 2]
    return arr[arr.shape[0] // 2]


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = os.path.join(args.run_dir, args.pair) if args.pair else args.run_dir
    grids = {name: _load_grid(os.path.join(run_dir, name))
             for name in ("moving", "fixed", "f_hat0", "phi0", "var_image", "var_field")}
    missing = [n for n in ("moving", "fixed", "f_hat0", "phi0") if grids[n] is None]
    if missing:
        raise UsageError(f"{run_dir} lacks registration outputs: {', '.join(missing)}")
    ndim = grids["moving"].ndim
    with_var = grids["var_image"] is not None and grids["var_field"] is not None
    panels = ["moving", "fixed", "f_hat0", "phi0"] + (["var_image", "var_field"] if with_var else [])
    titles = {"moving": "moving m", "fixed": "fixed f", "f_hat0": "prediction f̂",
              "phi0": "deformation φ", "var_image": "var(f̂)", "var_field": "var(φ)"}

    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.4))
    ranges = {}
    for ax, name in zip(axes, panels):
        ax.set_axis_off()
        if name == "phi0":
            phi = _middle_slice(grids["phi0"], ndim, vector=True)
            _draw_grid(ax, phi, background=_middle_slice(grids["f_hat0"], ndim))
        elif name.startswith("var_"):
            img = _middle_slice(grids[name], ndim)
            lo, hi = float(img.min()), float(img.max())
            ranges[name] = (lo, hi)
            im = ax.imshow(img, cmap="inferno", vmin=lo, vmax=hi if hi > lo else lo + 1e-12)
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.02)
        else:
            ax.imshow(_middle_slice(grids[name], ndim), cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(titles[name], fontsize=9)
    caption = "; ".join(f"{titles[k]} range [{lo:.3g}, {hi:.3g}]" for k, (lo, hi) in ranges.items())
    if caption:
        fig.text(0.5, 0.02, caption, ha="center", fontsize=8)
    out = args.out or os.path.join(run_dir, "figure.png")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    print(f"wrote {out} with {len(panels)} panels")
    if caption:
        print(caption)
    resolved = {"run_dir": os.path.abspath(run_dir), "out": os.path.abspath(out)}
    return os.path.dirname(os.path.abspath(out)), resolved, [], {"figure": out, "panels": len(panels),
                                                                "variance_ranges": ranges}


def _draw_grid(ax, phi, background=None, every=4):
    """Warped grid: the lines of the fixed-space lattice moved by the displacement."""
    H, W = phi.shape[1:]
    if background is not None:
        ax.imshow(background, cmap="gray", vmin=0.0, vmax=1.0, alpha=0.5)
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    yi, xj = ii + phi[0], jj + phi[1]
    for r in range(0, H, every):
        ax.plot(xj[r], yi[r], color="tab:cyan", linewidth=0.6)
    for c in range(0, W, every):
        ax.plot(xj[:, c], yi[:, c], color="tab:cyan", linewidth=0.6)
    ax.set_xlim(-0.5, W - 0.5)
    ax.set_ylim(H - 0.5, -0.5)


# --------------------------------------------------------------------------

COMMANDS = {"config": cmd_config, "synth": cmd_synth, "train": cmd_train,
            "register": cmd_register, "evaluate": cmd_evaluate, "plot": cmd_plot}


def build_parser():
    parser = argparse.ArgumentParser(prog="lapreg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="write a default (or smoke) training config")
    p.add_argument("path")
    p.add_argument("--smoke", action="store_true", help="desk-scale 2D settings")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="generate a synthetic pair dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--ndim", type=int, choices=(2, 3), default=2)
    p.add_argument("--lesion", action="store_true")
    p.add_argument("--splits", default="train=0.8,val=0.1,test=0.1")
    p.add_argument("--out")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--resume")
    p.add_argument("--log-every", type=int, default=25)

    p = sub.add_parser("register", help="register one moving image onto one fixed image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)

    p = sub.add_parser("evaluate", help="metric report over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--pairing", choices=("inter", "intra"))
    p.add_argument("--limit", type=int)
    p.add_argument("--out")

    p = sub.add_parser("plot", help="multi-panel figure of a registration run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--pair")
    p.add_argument("--out")
    return parser


def main(argv=None):
    from .trainer import NonFiniteLossError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    try:
        outcome = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc} (term {exc.term})", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if outcome is not None:
        out, resolved, checkpoint_ids, extra = outcome
        extra = dict(extra)
        manifest = RunManifest(command=args.command, config_path=extra.pop("config_path", None),
                               config_hash=config_hash(resolved), checkpoint_ids=checkpoint_ids,
                               output_dir=os.path.abspath(out), seed=extra.pop("seed", None),
                               wall_time_s=round(time.time() - t0, 3), extra=extra)
        try:
            os.makedirs(out, exist_ok=True)
            # a plot lands next to the run it draws; keep that run's manifest intact
            manifest.write(out, "plot_manifest.json" if args.command == "plot" else "run_manifest.json")
        except OSError as exc:
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
