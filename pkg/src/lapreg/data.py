"""Data types and IO for volumes and annotations, dataset manifests, pairing, and the synthetic generator."""

import csv
import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import nibabel as nib
import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .field_ops import crop_interior, integrate_svf, jacobian_determinant, sample_at, warp

MANIFEST_SCHEMA = 1
PRE_OP = "pre-operative"
FOLLOW_UP = "follow-up"


@dataclass
class Image:
    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim:
            raise ValueError("one spacing value per spatial axis is required")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be strictly positive")
        if not np.isfinite(self.data).all():
            raise ValueError("image intensities must be finite")
        if min(self.data.shape) < 2:
            raise ValueError("every spatial axis needs at least 2 voxels")

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def shape(self):
        return self.data.shape

    def tensor(self, dtype=torch.float32):
        return torch.as_tensor(np.ascontiguousarray(self.data), dtype=dtype)[None, None]


@dataclass
class LandmarkSet:
    ids: List[str]
    points: np.ndarray  # (N, D) voxel coordinates

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.points = np.asarray(self.points, dtype=np.float64).reshape(len(self.ids), -1)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("landmark ids must be unique")

    def __len__(self):
        return len(self.ids)

    def as_dict(self):
        return dict(zip(self.ids, self.points))

    def translated(self, offset):
        return LandmarkSet(list(self.ids), self.points + np.asarray(offset, dtype=np.float64))


@dataclass
class SegmentationMap:
    labels: np.ndarray
    names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int64)
        if (self.labels < 0).any():
            raise ValueError("labels must be non-negative")

    @property
    def label_set(self):
        return sorted(int(v) for v in np.unique(self.labels) if v > 0)


@dataclass
class Subject:
    id: str
    image: Image
    segmentation: Optional[SegmentationMap] = None
    landmarks: Optional[LandmarkSet] = None
    session: Optional[str] = None
    patient: Optional[str] = None
    pad: Optional[list] = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patient is None:
            self.patient = self.id
        if self.segmentation is not None and self.segmentation.labels.shape != self.image.shape:
            raise ValueError(f"segmentation of {self.id} does not match its image")


@dataclass
class SyntheticPair:
    moving: Image
    fixed: Image
    true_field: np.ndarray  # (D, *S) displacement, fixed -> moving read positions
    landmarks_moving: LandmarkSet
    landmarks_fixed: LandmarkSet
    seg_moving: SegmentationMap
    seg_fixed: SegmentationMap
    lesion_mask: np.ndarray  # fixed-space grid, True where the lesion shows up after warping


# --------------------------------------------------------------------------
# IO

def normalize_intensity(data):
    """Min-max to [0, 1]; constant volumes map to 0."""
    data = np.asarray(data, dtype=np.float32)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return np.zeros_like(data), True
    return ((data - lo) / (hi - lo)).astype(np.float32), False


def load_volume(path):
    img = nib.load(str(path))
    if len(img.shape) not in (2, 3):
        if len(img.shape) == 4 and img.shape[3] == 1:
            img = nib.Nifti1Image(np.asarray(img.dataobj)[..., 0], img.affine, img.header)
        else:
            raise ValueError(f"{path}: expected a single scalar channel, got shape {img.shape}")
    if len(img.shape) == 3:
        img = nib.as_closest_canonical(img)
    data = np.asarray(img.dataobj, dtype=np.float32)
    spacing = tuple(float(z) for z in img.header.get_zooms()[: data.ndim])
    if data.size and data.min() >= 0.0 and data.max() <= 1.0 and data.max() > data.min():
        # already in range: rescaling would break intensity relations between saved pairs
        norm, degenerate = data, False
    else:
        norm, degenerate = normalize_intensity(data)
    image = Image(norm, spacing)
    image.degenerate = degenerate
    return image


def save_volume(image, path):
    ndim = image.data.ndim
    affine = np.eye(4)
    for a in range(ndim):
        affine[a, a] = image.spacing[a]
    nii = nib.Nifti1Image(np.asarray(image.data, dtype=np.float32), affine)
    nii.header.set_zooms(image.spacing)
    nib.save(nii, str(path))


def save_labels(seg, path, spacing):
    affine = np.eye(4)
    for a in range(seg.labels.ndim):
        affine[a, a] = spacing[a]
    nii = nib.Nifti1Image(seg.labels.astype(np.int16), affine)
    nib.save(nii, str(path))


def load_labels(path):
    img = nib.load(str(path))
    if len(img.shape) == 3:
        img = nib.as_closest_canonical(img)
    return SegmentationMap(np.asarray(img.dataobj).astype(np.int64))


def read_landmarks(path):
    ids, points = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        axes = [c for c in ("x", "y", "z") if c in reader.fieldnames]
        for row in reader:
            ids.append(row["id"])
            points.append([float(row[c]) for c in axes])
    return LandmarkSet(ids, np.array(points).reshape(len(ids), -1))


def write_landmarks(landmarks, path):
    axes = ["x", "y", "z"][: landmarks.points.shape[1]]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + axes)
        for i, p in zip(landmarks.ids, landmarks.points):
            writer.writerow([i] + [repr(float(c)) for c in p])


# --------------------------------------------------------------------------
# padding, splits, pairs

def pad_to_pyramid(subject, levels):
    """Zero-pad each axis up to a multiple of ``2^(levels-1)``, centred."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    mult = 2 ** (levels - 1)
    shape = subject.image.shape
    pads = []
    for n in shape:
        total = (-n) % mult
        pads.append((total // 2, total - total // 2))
    data = np.pad(subject.image.data, pads)
    image = Image(data, subject.image.spacing)
    seg = None
    if subject.segmentation is not None:
        seg = SegmentationMap(np.pad(subject.segmentation.labels, pads), dict(subject.segmentation.names))
    lms = None
    if subject.landmarks is not None:
        lms = subject.landmarks.translated([p[0] for p in pads])
    return Subject(subject.id, image, seg, lms, subject.session, subject.patient, pads, dict(subject.extras))


def crop_padding(array, pads):
    """Undo :func:`pad_to_pyramid` on the trailing ``len(pads)`` axes."""
    lead = array.ndim - len(pads)
    index = [slice(None)] * lead + [slice(b, n - a) for (b, a), n in zip(pads, array.shape[lead:])]
    return array[tuple(index)]


def _unit_hash(*parts):
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2 ** 64


def assign_split(key, seed, ratios):
    """Deterministic split name for ``key`` given ``ratios`` {name: weight}."""
    names = list(ratios)
    weights = np.array([ratios[n] for n in names], dtype=np.float64)
    edges = np.cumsum(weights / weights.sum())
    u = _unit_hash(key, seed)
    for name, edge in zip(names, edges):
        if u < edge:
            return name
    return names[-1]


def split_subjects(subjects, seed, ratios=None):
    ratios = ratios or {"train": 354, "val": 30, "test": 30}
    out = {name: [] for name in ratios}
    for s in subjects:
        out[assign_split(s.patient, seed, ratios)].append(s)
    return out


def make_pairs(subjects, scheme, seed, limit=None):
    """Ordered (moving, fixed) pairs.

    ``inter``: ordered pairs of distinct subjects in a seeded order;
    ``intra``: per patient, follow-up moving onto pre-operative.
    """
    rng = np.random.default_rng(seed)
    if scheme == "inter":
        pairs = list(itertools.permutations(subjects, 2))
    elif scheme == "intra":
        by_patient = {}
        for s in subjects:
            if s.session not in (PRE_OP, FOLLOW_UP):
                raise ValueError(f"subject {s.id} lacks a pre-operative/follow-up session tag")
            by_patient.setdefault(s.patient, {})[s.session] = s
        pairs = []
        for patient in sorted(by_patient):
            sessions = by_patient[patient]
            if PRE_OP in sessions and FOLLOW_UP in sessions:
                pairs.append((sessions[FOLLOW_UP], sessions[PRE_OP]))
    else:
        raise ValueError(f"unknown pairing scheme {scheme!r}")
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    return pairs[:limit] if limit is not None else pairs


# --------------------------------------------------------------------------
# manifests

def write_manifest(subjects, root, path, ndim, splits=None, meta=None):
    """Write images/annotations under ``root`` and a JSON manifest at ``path``."""
    os.makedirs(root, exist_ok=True)
    entries = []
    for s in subjects:
        stem = s.id.replace("/", "_").replace(":", "_")
        img_path = os.path.join(root, f"{stem}.nii.gz")
        save_volume(s.image, img_path)
        entry = {"id": s.id, "patient": s.patient, "session": s.session,
                 "image": os.path.relpath(img_path, os.path.dirname(path) or "."),
                 "segmentation": None, "landmarks": None,
                 "split": (splits or {}).get(s.id)}
        if s.segmentation is not None:
            seg_path = os.path.join(root, f"{stem}_seg.nii.gz")
            save_labels(s.segmentation, seg_path, s.image.spacing)
            entry["segmentation"] = os.path.relpath(seg_path, os.path.dirname(path) or ".")
        if s.landmarks is not None:
            lm_path = os.path.join(root, f"{stem}_landmarks.csv")
            write_landmarks(s.landmarks, lm_path)
            entry["landmarks"] = os.path.relpath(lm_path, os.path.dirname(path) or ".")
        extras = {}
        for key, arr in s.extras.items():
            extra_path = os.path.join(root, f"{stem}_{key}.npy")
            np.save(extra_path, arr)
            extras[key] = os.path.relpath(extra_path, os.path.dirname(path) or ".")
        entry["extras"] = extras
        entries.append(entry)
    doc = {"schema": MANIFEST_SCHEMA, "ndim": ndim, "meta": meta or {}, "subjects": entries}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc


def read_manifest(path):
    """Returns ``(subjects, splits, doc)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported manifest schema {doc.get('schema')!r}")
    base = os.path.dirname(os.path.abspath(path))
    subjects, splits = [], {}
    for e in doc["subjects"]:
        image = load_volume(os.path.join(base, e["image"]))
        seg = load_labels(os.path.join(base, e["segmentation"])) if e.get("segmentation") else None
        lms = read_landmarks(os.path.join(base, e["landmarks"])) if e.get("landmarks") else None
        extras = {k: np.load(os.path.join(base, p)) for k, p in (e.get("extras") or {}).items()}
        subjects.append(Subject(e["id"], image, seg, lms, e.get("session"), e.get("patient"), extras=extras))
        if e.get("split"):
            splits[e["id"]] = e["split"]
    return subjects, splits, doc


# --------------------------------------------------------------------------
# synthetic data

def smooth_random_velocity(shape, max_disp, rng, smoothness=None):
    """Band-limited random velocity, ``(D, *shape)``, scaled to ``max |v| = max_disp``."""
    D = len(shape)
    sigma = smoothness if smoothness is not None else min(shape) / 8.0
    comps = [gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap") for _ in range(D)]
    v = np.stack(comps)
    peak = np.sqrt((v ** 2).sum(0)).max()
    return (v * (max_disp / peak)).astype(np.float64)


def _bump_texture(shape, rng, n_bumps):
    D = len(shape)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    centers = rng.random((n_bumps, D)) * np.array(shape)
    sigmas = rng.uniform(0.04, 0.09, n_bumps) * min(shape)
    amps = rng.uniform(0.3, 1.0, n_bumps)
    bumps = np.stack([a * np.exp(-((grid - c.reshape((D,) + (1,) * D)) ** 2).sum(0) / (2 * s * s))
                      for c, s, a in zip(centers, sigmas, amps)])
    return bumps, centers


def _invert_points(points, disp, iters=50):
    # solve x + u(x) = y by fixed-point iteration on the fixed grid
    field = torch.as_tensor(disp, dtype=torch.float64)[None]
    y = torch.as_tensor(points, dtype=torch.float64)[None]
    x = y.clone()
    for _ in range(iters):
        u = sample_at(field, x)[0].T
        x = y - u[None]
    return x[0].numpy()


def generate_synthetic_pair(seed, size=64, lesion=False, ndim=2, n_bumps=40, n_landmarks=12,
                            max_disp_frac=0.05, grain=0.15):
    """Moving/fixed pair related by a known diffeomorphism.

    The moving image is a sum of Gaussian bumps over a fine smooth-noise
    grain; interior bump centres serve as landmarks and the dominant bump per
    voxel gives the segmentation. The fixed image is the moving one pulled
    back through ``integrate_svf`` of a smooth random velocity whose
    displacement is capped at ``max_disp_frac * size``. With ``lesion`` a bright disc is painted into
    the moving image only.
    """
    rng = np.random.default_rng(seed)
    shape = (size,) * ndim
    bumps, centers = _bump_texture(shape, rng, n_bumps)
    blobs = bumps.sum(0)
    noise = gaussian_filter(rng.standard_normal(shape), 1.5)
    texture = blobs + grain * noise / noise.std()
    moving_clean = (texture - texture.min()) / (texture.max() - texture.min())
    labels = np.where(blobs > 0.3 * blobs.max(), bumps.argmax(0) + 1, 0)
    inside = np.all((centers > 0.15 * size) & (centers < 0.85 * size - 1), axis=1)
    lm_index = np.flatnonzero(inside)[:n_landmarks]
    if lm_index.size < 3:
        lm_index = np.argsort(np.abs(centers - size / 2).max(axis=1))[:n_landmarks]
    landmark_points = centers[lm_index]

    cap = max_disp_frac * size
    for _ in range(100):
        v = smooth_random_velocity(shape, 0.8 * cap, rng)
        disp = integrate_svf(torch.as_tensor(v)[None], 7)
        peak = disp[0].norm(dim=0).max().item()
        jac = crop_interior(jacobian_determinant(disp), ndim)
        if peak <= cap and bool((jac > 0).all()):
            break
    else:  # pragma: no cover - the cap keeps rejection rare
        raise RuntimeError("could not draw a diffeomorphic ground-truth field")
    disp_np = disp[0].numpy()

    lesion_moving = np.zeros(shape, dtype=np.float64)
    if lesion:
        grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
        center = 0.3 * size + rng.random(ndim) * 0.4 * size
        radius = rng.uniform(0.07, 0.1) * size
        dist = np.sqrt(((grid - center.reshape((ndim,) + (1,) * ndim)) ** 2).sum(0))
        lesion_moving = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    moving = np.maximum(moving_clean, lesion_moving)

    def pull(arr, mode="linear"):
        t = torch.as_tensor(arr, dtype=torch.float64)[None, None]
        return warp(t, disp, mode)[0, 0].numpy()

    fixed = pull(moving_clean)
    seg_fixed = pull(labels.astype(np.float64), "nearest").astype(np.int64)
    lesion_mask = pull(lesion_moving) > 0.5 if lesion else np.zeros(shape, dtype=bool)

    ids = [f"lm{i:02d}" for i in range(len(landmark_points))]
    lm_moving = LandmarkSet(ids, landmark_points)
    lm_fixed = LandmarkSet(ids, _invert_points(landmark_points, disp_np))

    spacing = (1.0,) * ndim
    return SyntheticPair(
        moving=Image(moving.astype(np.float32), spacing),
        fixed=Image(fixed.astype(np.float32), spacing),
        true_field=disp_np,
        landmarks_moving=lm_moving,
        landmarks_fixed=lm_fixed,
        seg_moving=SegmentationMap(labels),
        seg_fixed=SegmentationMap(seg_fixed),
        lesion_mask=lesion_mask,
    )


def synthetic_subjects(pair, index):
    """The two scans of a synthetic pair as follow-up (moving) and pre-operative (fixed) subjects."""
    patient = f"synth{index:04d}"
    moving = Subject(f"{patient}_fu", pair.moving, pair.seg_moving, pair.landmarks_moving,
                     FOLLOW_UP, patient)
    fixed = Subject(f"{patient}_pre", pair.fixed, pair.seg_fixed, pair.landmarks_fixed,
                    PRE_OP, patient,
                    extras={"true_field": pair.true_field.astype(np.float32),
                            "lesion_mask": pair.lesion_mask.astype(np.uint8)})
    return moving, fixed


def synthetic_dataset(n, seed, size=64, lesion=False, ndim=2):
    subjects = []
    for i in range(n):
        pair = generate_synthetic_pair(int(_unit_hash("synth", seed, i) * 2 ** 31), size, lesion, ndim)
        subjects.extend(synthetic_subjects(pair, i))
    return subjects
