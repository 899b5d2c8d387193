"""MAP registration by mean propagation, posterior sampling and variance maps."""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import nibabel as nib
import numpy as np
import torch

from .data import Image
from .model import load_checkpoint, state_fingerprint


@dataclass
class RegistrationResult:
    phi0: np.ndarray     # (D, *S) displacement, voxels
    f_hat0: np.ndarray   # (*S) warped moving image
    levels: Optional[object] = None
    provenance: dict = field(default_factory=dict)


@dataclass
class UncertaintyMaps:
    var_image: np.ndarray
    var_field: np.ndarray
    n_samples: int
    seed: Optional[int] = None


def _resolve_model(checkpoint):
    if isinstance(checkpoint, (str, os.PathLike)):
        model, _ = load_checkpoint(checkpoint)
        return model
    return checkpoint


def _as_tensor(img, dtype, ndim):
    if isinstance(img, Image):
        return img.tensor(dtype)
    t = torch.as_tensor(img, dtype=dtype)
    if t.dim() == ndim:
        t = t[None, None]
    return t


def _prepare(model, m, f):
    dtype = next(model.parameters()).dtype
    ndim = model.config.ndim
    mt, ft = _as_tensor(m, dtype, ndim), _as_tensor(f, dtype, ndim)
    if mt.dim() - 2 != ndim:
        raise ValueError(f"model expects {model.config.ndim}D inputs, got {mt.dim() - 2}D")
    return mt, ft


def _checkpoint_id(model):
    cid = getattr(model, "checkpoint_id", None)
    return cid if cid is not None else state_fingerprint(model)


def _result(out, provenance, keep_levels):
    return RegistrationResult(
        phi0=out.phi0[0].detach().cpu().numpy(),
        f_hat0=out.f_hat0[0, 0].detach().cpu().numpy(),
        levels=out if keep_levels else None,
        provenance=provenance,
    )


def register_map(checkpoint, m, f, keep_levels=False):
    """Single mean-propagation forward pass; consumes no randomness."""
    model = _resolve_model(checkpoint)
    mt, ft = _prepare(model, m, f)
    with torch.no_grad():
        out = model(mt, ft, mode="mean")
    return _result(out, {"checkpoint": _checkpoint_id(model), "mode": "mean", "seed": None}, keep_levels)


def sample_seed(seed, index):
    """Seed of sample ``index``'s private stream; independent of how many samples are drawn."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def sample_registrations(checkpoint, m, f, n, seed, temperature=1.0, keep_levels=False):
    """``n`` posterior samples, sample ``i`` drawn from the stream ``sample_seed(seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    model = _resolve_model(checkpoint)
    mt, ft = _prepare(model, m, f)
    cid = _checkpoint_id(model)
    results = []
    with torch.no_grad():
        for i in range(n):
            s = sample_seed(seed, i)
            rng = torch.Generator().manual_seed(s)
            out = model(mt, ft, mode="sample", rng=rng, temperature=temperature)
            results.append(_result(out, {"checkpoint": cid, "mode": "sample", "seed": seed,
                                         "index": i, "stream_seed": s}, keep_levels))
    return results


def variance_maps(samples, seed=None):
    """Unbiased per-voxel variance of warped intensities and trace of displacement covariance."""
    if len(samples) < 2:
        raise ValueError("variance maps need at least 2 samples")
    shapes = {s.f_hat0.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError("samples have inconsistent shapes")
    images = np.stack([s.f_hat0 for s in samples]).astype(np.float64)
    fields = np.stack([s.phi0 for s in samples]).astype(np.float64)
    var_image = images.var(axis=0, ddof=1)
    var_field = fields.var(axis=0, ddof=1).sum(axis=0)
    if seed is None:
        seed = samples[0].provenance.get("seed")
    return UncertaintyMaps(var_image, var_field, len(samples), seed)


# --------------------------------------------------------------------------
# export

def _write_grid(array, path_stem, spacing, png=True):
    """NIfTI for 3D grids; .npy + JSON sidecar (+ PNG) for 2D."""
    array = np.asarray(array, dtype=np.float32)
    spatial = array.shape[-len(spacing):]
    if len(spatial) == 3:
        affine = np.diag(list(spacing) + [1.0])
        data = np.moveaxis(array, 0, -1) if array.ndim == 4 else array
        path = path_stem + ".nii.gz"
        nib.save(nib.Nifti1Image(data, affine), path)
        return [path]
    paths = [path_stem + ".npy", path_stem + ".json"]
    np.save(paths[0], array)
    sidecar = {"shape": list(array.shape), "dtype": "float32", "spacing": list(spacing),
               "min": float(array.min()), "max": float(array.max())}
    with open(paths[1], "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    if png and array.ndim == 2:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        plt.imsave(path_stem + ".png", array, cmap="gray", vmin=float(array.min()),
                   vmax=float(array.max()) if array.max() > array.min() else float(array.min()) + 1)
        paths.append(path_stem + ".png")
    return paths


def export_result(result, out_dir, spacing, prefix=""):
    os.makedirs(out_dir, exist_ok=True)
    paths = _write_grid(result.phi0, os.path.join(out_dir, prefix + "phi0"), spacing, png=False)
    paths += _write_grid(result.f_hat0, os.path.join(out_dir, prefix + "f_hat0"), spacing)
    return paths


def export_uncertainty(maps, out_dir, spacing):
    os.makedirs(out_dir, exist_ok=True)
    paths = _write_grid(maps.var_image, os.path.join(out_dir, "var_image"), spacing)
    paths += _write_grid(maps.var_field, os.path.join(out_dir, "var_field"), spacing)
    return paths


def write_sample_manifest(samples, paths_per_sample, path):
    doc = {"n_samples": len(samples),
           "samples": [{"index": s.provenance.get("index"), "seed": s.provenance.get("seed"),
                        "stream_seed": s.provenance.get("stream_seed"),
                        "checkpoint": s.provenance.get("checkpoint"), "files": files}
                       for s, files in zip(samples, paths_per_sample)]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc
