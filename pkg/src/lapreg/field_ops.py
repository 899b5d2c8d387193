"""Dimension-generic warping and integration kernels plus field analysis.

Tensor conventions used throughout the package:

* images are ``(B, C, *S)`` with ``len(S) == D`` and ``D in (2, 3)``;
* displacement / velocity fields are ``(B, D, *S)`` in voxel units, channel
  ``d`` holding the displacement along spatial axis ``d``;
* sampling is pull-back: output voxel ``x`` reads the source at ``x + u(x)``,
  with coordinates clamped to the border voxel.
"""

import itertools

import torch
import torch.nn.functional as F


class FieldShapeError(ValueError):
    """Raised when images and fields do not agree on shape or dimension."""


def spatial_dims(t):
    return t.dim() - 2


def _check_finite(t, name):
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def _check_field(field):
    if field.dim() not in (4, 5) or field.shape[1] != spatial_dims(field):
        raise FieldShapeError(
            f"expected field of shape (B, D, *S) with D spatial axes, got {tuple(field.shape)}")


def identity_grid(shape, dtype=torch.float32, device=None):
    """Voxel coordinates of a grid, shape ``(D, *shape)``."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def _interpolate(source, coords, mode):
    # source (B, C, *S), coords (B, D, *S') in voxel units of source
    B, C = source.shape[:2]
    shape = source.shape[2:]
    D = len(shape)
    out_shape = coords.shape[2:]
    flat_src = source.reshape(B, C, -1)
    strides = [1] * D
    for a in range(D - 2, -1, -1):
        strides[a] = strides[a + 1] * shape[a + 1]

    clamped = [coords[:, a].clamp(0, shape[a] - 1) for a in range(D)]

    def gather(index_per_axis):
        flat = sum(index_per_axis[a] * strides[a] for a in range(D))
        flat = flat.reshape(B, 1, -1).expand(B, C, -1)
        return flat_src.gather(2, flat)

    if mode == "nearest":
        idx = [torch.round(c).long() for c in clamped]
        return gather(idx).reshape(B, C, *out_shape)
    if mode != "linear":
        raise ValueError(f"unknown interpolation mode {mode!r}")

    lower, frac = [], []
    for a in range(D):
        if shape[a] == 1:
            i0 = torch.zeros_like(clamped[a], dtype=torch.long)
            lower.append(i0)
            frac.append(torch.zeros_like(clamped[a]))
            continue
        i0 = torch.floor(clamped[a]).clamp(max=shape[a] - 2)
        lower.append(i0.long())
        frac.append(clamped[a] - i0)

    out = None
    for corner in itertools.product((0, 1), repeat=D):
        idx = []
        weight = None
        for a, bit in enumerate(corner):
            idx.append((lower[a] + bit).clamp(max=shape[a] - 1))
            w = frac[a] if bit else 1 - frac[a]
            weight = w if weight is None else weight * w
        term = gather(idx) * weight.reshape(B, 1, -1)
        out = term if out is None else out + term
    return out.reshape(B, C, *out_shape)


def warp(source, field, interpolation="linear"):
    """Resample ``source`` at ``x + field(x)``.

    Linear interpolation reproduces affine intensity ramps exactly away from
    the border, and a zero field returns the source bit-for-bit.
    """
    _check_field(field)
    if source.shape[2:] != field.shape[2:] or source.shape[0] != field.shape[0]:
        raise FieldShapeError(
            f"source {tuple(source.shape)} and field {tuple(field.shape)} disagree")
    _check_finite(field, "field")
    grid = identity_grid(field.shape[2:], dtype=field.dtype, device=field.device)
    coords = grid.unsqueeze(0) + field
    return _interpolate(source, coords, interpolation)


def sample_at(source, points, interpolation="linear"):
    """Interpolate ``source`` (B, C, *S) at voxel ``points`` (B, N, D) -> (B, C, N)."""
    coords = points.permute(0, 2, 1)
    return _interpolate(source, coords, interpolation)


def compose(outer, inner):
    """Displacement of ``outer o inner``: ``u_inner(x) + u_outer(x + u_inner(x))``."""
    if outer.shape != inner.shape:
        raise FieldShapeError(f"cannot compose {tuple(outer.shape)} with {tuple(inner.shape)}")
    return inner + warp(outer, inner)


def integrate_svf(velocity, steps=7):
    """Exponentiate a stationary velocity field by scaling and squaring."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_field(velocity)
    _check_finite(velocity, "velocity")
    disp = velocity / (2 ** steps)
    for _ in range(steps):
        disp = compose(disp, disp)
    return disp


def downsample(img):
    """Halve every spatial axis by 2^D block averaging (floor on odd sizes)."""
    D = spatial_dims(img)
    pool = F.avg_pool2d if D == 2 else F.avg_pool3d
    return pool(img, kernel_size=2, stride=2)


def upsample(img):
    """Double every spatial axis with (bi/tri)linear interpolation.

    Cell-centred geometry, consistent with :func:`downsample`.
    """
    mode = "bilinear" if spatial_dims(img) == 2 else "trilinear"
    return F.interpolate(img, scale_factor=2, mode=mode, align_corners=False)


def resize_image(img, factor):
    if factor == 0.5:
        return downsample(img)
    if factor == 2:
        return upsample(img)
    raise ValueError(f"factor must be 0.5 or 2, got {factor}")


def upsample_velocity(velocity):
    """Move a field one level up the pyramid: double the grid, double the vectors."""
    return 2.0 * upsample(velocity)


def jacobian_determinant(field):
    """det(I + grad u) per voxel, shape ``(B, *S)``.

    Central differences inside, one-sided at the border.
    """
    _check_field(field)
    D = spatial_dims(field)
    if min(field.shape[2:]) < 3:
        raise FieldShapeError("jacobian_determinant needs at least 3 voxels per axis")
    dims = tuple(range(1, D + 1))
    rows = []
    for i in range(D):
        grads = torch.gradient(field[:, i], dim=dims, edge_order=1)
        rows.append(torch.stack(grads, dim=-1))
    jac = torch.stack(rows, dim=-2)
    jac = jac + torch.eye(D, dtype=field.dtype, device=field.device)
    return torch.linalg.det(jac)


def spatial_gradient(field):
    """Forward differences of every component along every axis.

    Returns a list with one ``(B, D, *S)`` tensor per axis; the last slice
    along the differentiated axis is replicated, so its difference is zero.
    """
    grads = []
    for axis in range(2, field.dim()):
        last = field.narrow(axis, field.shape[axis] - 1, 1)
        padded = torch.cat([field, last], dim=axis)
        grads.append(padded.narrow(axis, 1, field.shape[axis]) - field)
    return grads


def crop_interior(t, n_spatial, margin=1):
    """Drop ``margin`` voxels from each border of the trailing ``n_spatial`` axes."""
    if margin == 0:
        return t
    index = [slice(None)] * (t.dim() - n_spatial) + [slice(margin, -margin)] * n_spatial
    return t[tuple(index)]
