"""Loss terms: per-level KL, windowed NCC with deep supervision, diffusion regularizer."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .field_ops import downsample, spatial_dims, spatial_gradient

NCC_EPS = 1e-5


@dataclass
class LossWeights:
    beta: float = 0.1
    gamma: float = 0.05
    lam: float = 0.025
    sigma_sq_top: float = 0.25
    sigma_sq_other: float = 1.0
    # "image": level-l KL summed over its grid, divided by the input-resolution
    # position count, then scaled by w_l.  "level": voxel mean of level l times w_l.
    kl_normalization: str = "image"

    def __post_init__(self):
        for name in ("beta", "gamma", "lam", "sigma_sq_top", "sigma_sq_other"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sigma_sq_top <= 0 or self.sigma_sq_other <= 0:
            raise ValueError("image noise variances must be positive")
        if self.kl_normalization not in ("image", "level"):
            raise ValueError("kl_normalization must be 'image' or 'level'")

    @staticmethod
    def level_weight(level, ndim):
        # coarser levels hold 2^D times fewer voxels per step down
        return float(2 ** (ndim * level))

    @staticmethod
    def window(level, latent_levels):
        return 1 + 2 * (latent_levels - level)

    def sigma_sq(self, level):
        return self.sigma_sq_top if level == 0 else self.sigma_sq_other


def kl_diag_gaussian(params, reduction="sum"):
    """KL[N(mu, sigma^2) || N(0, 1)] summed (or averaged) over all elements.

    ``params`` is anything with ``mu`` and ``log_sigma`` tensors.
    """
    mu, log_sigma = params.mu, params.log_sigma
    if not (torch.isfinite(mu).all() and torch.isfinite(log_sigma).all()):
        raise ValueError("non-finite posterior parameters")
    kl = 0.5 * (mu * mu + torch.exp(2 * log_sigma) - 1.0) - log_sigma
    if reduction == "sum":
        return kl.sum()
    if reduction == "mean":
        return kl.mean()
    if reduction == "none":
        return kl
    raise ValueError(f"unknown reduction {reduction!r}")


def _box_sum(x, k):
    D = spatial_dims(x)
    pad = k // 2
    x = F.pad(x, [pad] * (2 * D), mode="replicate")
    kernel = torch.ones((1, 1) + (k,) * D, dtype=x.dtype, device=x.device)
    conv = F.conv2d if D == 2 else F.conv3d
    B, C = x.shape[:2]
    out = conv(x.reshape(B * C, 1, *x.shape[2:]), kernel)
    return out.reshape(B, C, *out.shape[2:])


def local_ncc_map(a, b, window, eps=NCC_EPS):
    """Per-voxel squared correlation over ``window^D`` neighbourhoods.

    Borders are handled by edge replication, so the value is invariant to
    affine intensity maps everywhere.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be a positive odd integer")
    if window > min(a.shape[2:]):
        raise ValueError("window larger than the image")
    n = float(window ** spatial_dims(a))
    sa, sb = _box_sum(a, window), _box_sum(b, window)
    saa, sbb, sab = _box_sum(a * a, window), _box_sum(b * b, window), _box_sum(a * b, window)
    cross = sab - sa * sb / n
    var_a = (saa - sa * sa / n).clamp(min=0)
    var_b = (sbb - sb * sb / n).clamp(min=0)
    cc = cross * cross / (var_a * var_b + eps)
    return cc.clamp(0.0, 1.0)


def local_ncc(a, b, window, eps=NCC_EPS):
    """Mean squared local correlation coefficient, in [0, 1]."""
    return local_ncc_map(a, b, window, eps).mean()


def diffusion_regularizer(field):
    """Mean over voxels of the summed squared forward differences of the displacement."""
    total = 0.0
    for g in spatial_gradient(field):
        total = total + (g * g).sum(dim=1)
    return total.mean()


def gaussian_log_likelihood(target, prediction, sigma_sq):
    """log N(target; prediction, sigma_sq I), summed over elements."""
    resid = target - prediction
    n = resid.numel()
    return -0.5 * (resid * resid).sum() / sigma_sq - 0.5 * n * math.log(2 * math.pi * sigma_sq)


def image_pyramid(img, levels):
    out = [img]
    for _ in range(1, levels):
        out.append(downsample(out[-1]))
    return out


def similarity(f_hat, f_target, window):
    # NCC(f_hat_l, f_l): the warped coarse moving image against the coarse fixed one
    return local_ncc(f_hat, f_target, window)


def total_loss(outputs, m, f, weights):
    """Weighted objective and its named per-level breakdown.

    Regularizer values are voxel means. The KL of level ``l`` enters as
    ``w_l * KL_sum_l / N_0`` with ``N_0`` the number of latent positions at
    input resolution (``kl_normalization="image"``) or as ``w_l * KL_mean_l``
    (``"level"``). Since ``N_0 = w_l N_l`` the first equals ``KL_mean_l``.
    The breakdown holds the unweighted values (``kl_l*``, ``ncc_l*``, ``reg_l*``) plus the
    weighted sums (``kl``, ``sim``, ``reg``) and ``total``.
    """
    L = len(outputs.levels)
    if L != outputs.latent_levels:
        raise ValueError(f"expected {outputs.latent_levels} levels, got {L}")
    D = spatial_dims(m)
    n_input = m.shape[0] * outputs.levels[0].posterior.mu.shape[1] * m[0, 0].numel()
    f_pyr = image_pyramid(f, L)
    zero = m.new_zeros(())
    kl_sum, sim_sum, reg_sum = zero, zero, zero
    breakdown = {}
    for l, lvl in enumerate(outputs.levels):
        if outputs.ablation and l > 0:
            kl_l = kl_sum_l = ncc_l = reg_l = zero
        else:
            kl_l = kl_diag_gaussian(lvl.posterior, reduction="mean")
            kl_sum_l = kl_diag_gaussian(lvl.posterior, reduction="sum")
            ncc_l = similarity(lvl.f_hat, f_pyr[l], weights.window(l, L))
            reg_l = diffusion_regularizer(lvl.phi)
        w = weights.level_weight(l, D)
        if weights.kl_normalization == "image":
            kl_sum = kl_sum + w * kl_sum_l / n_input
        else:
            kl_sum = kl_sum + w * kl_l
        sim_sum = sim_sum + (w / weights.sigma_sq(l)) * ncc_l
        reg_sum = reg_sum + w * reg_l
        breakdown[f"kl_l{l}"] = kl_l
        breakdown[f"ncc_l{l}"] = ncc_l
        breakdown[f"reg_l{l}"] = reg_l
    total = weights.beta * kl_sum - weights.gamma * sim_sum + weights.lam * reg_sum
    breakdown["kl"] = weights.beta * kl_sum
    breakdown["sim"] = -weights.gamma * sim_sum
    breakdown["reg"] = weights.lam * reg_sum
    breakdown["total"] = total
    return total, breakdown
