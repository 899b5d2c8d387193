"""Hierarchical probabilistic Laplacian-pyramid registration network.

The network encodes the (moving, fixed) pair into ``K`` feature levels. The
``L`` finest levels carry a diagonal-Gaussian latent grid ``z_l``; going from
coarse to fine, each latent is sampled (or its mean propagated), decoded into
a residual velocity, added to the upsampled velocity of the level below,
integrated by scaling and squaring, and used to warp the downscaled moving
image. Each level feeds ``(z_l, v_l, phi_l, f_hat_l)`` to the level above.
"""

import hashlib
import io
from dataclasses import asdict, dataclass
from typing import List, Optional

import torch
import torch.nn as nn

from .field_ops import downsample, integrate_svf, upsample, upsample_velocity, warp

CHECKPOINT_SCHEMA = 1
LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 3.0
# mean-head output scale at init: small (KL near 0) but nonzero, since a zero
# mean head next to a zero velocity head is a saddle
MU_INIT_GAIN = 0.3


@dataclass
class ModelConfig:
    ndim: int = 2
    levels: int = 5
    latent_levels: int = 4
    latent_channels: Optional[int] = None
    base_channels: int = 16
    max_channel_mult: int = 8
    integration_steps: int = 7
    nonhierarchical_ablation: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ValueError("ndim must be 2 or 3")
        if not 1 <= self.latent_levels <= self.levels:
            raise ValueError("need 1 <= latent_levels <= levels")
        if self.latent_channels is None:
            self.latent_channels = self.ndim
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.integration_steps < 1:
            raise ValueError("integration_steps must be >= 1")

    def channels(self, level):
        return self.base_channels * min(2 ** level, self.max_channel_mult)

    @property
    def divisor(self):
        return 2 ** (self.levels - 1)

    def feedback_channels(self):
        return self.latent_channels + 2 * self.ndim + 1


@dataclass
class GaussianFieldParams:
    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError("mu and log_sigma must share a shape")

    @property
    def sigma(self):
        return torch.exp(self.log_sigma)


@dataclass
class Level:
    posterior: GaussianFieldParams
    z: torch.Tensor
    residual: torch.Tensor
    v: torch.Tensor
    phi: torch.Tensor
    f_hat: torch.Tensor


@dataclass
class LevelOutputs:
    levels: List[Level]
    latent_levels: int
    ablation: bool = False

    @property
    def phi0(self):
        return self.levels[0].phi

    @property
    def f_hat0(self):
        return self.levels[0].f_hat


def _conv(ndim):
    return nn.Conv2d if ndim == 2 else nn.Conv3d


class ConvBlock(nn.Sequential):
    def __init__(self, ndim, c_in, c_out):
        Conv = _conv(ndim)
        super().__init__(
            Conv(c_in, c_out, 3, padding=1),
            nn.LeakyReLU(0.2),
            Conv(c_out, c_out, 3, padding=1),
            nn.LeakyReLU(0.2),
        )
        # He init keeps activations O(1) through the stack; the framework default
        # shrinks them level by level and training stalls near the identity
        for conv in (self[0], self[2]):
            nn.init.kaiming_normal_(conv.weight, a=0.2, nonlinearity="leaky_relu")
            nn.init.zeros_(conv.bias)


def _zero_conv(ndim, c_in, c_out):
    conv = _conv(ndim)(c_in, c_out, 3, padding=1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class PosteriorHead(nn.Module):
    def __init__(self, ndim, c_in, c_hidden, latent_channels):
        super().__init__()
        self.block = ConvBlock(ndim, c_in, c_hidden)
        self.mu = _conv(ndim)(c_hidden, latent_channels, 3, padding=1)
        nn.init.normal_(self.mu.weight, std=MU_INIT_GAIN / self.mu.weight[0].numel() ** 0.5)
        nn.init.zeros_(self.mu.bias)
        self.log_sigma = _zero_conv(ndim, c_hidden, latent_channels)

    def forward(self, x):
        h = self.block(x)
        log_sigma = self.log_sigma(h).clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return GaussianFieldParams(self.mu(h), log_sigma)


class VelocityHead(nn.Module):
    def __init__(self, ndim, c_in, c_hidden):
        super().__init__()
        self.block = ConvBlock(ndim, c_in, c_hidden)
        self.out = _zero_conv(ndim, c_hidden, ndim)

    def forward(self, x):
        return self.out(self.block(x))


def sample_latent(params, rng, temperature=1.0):
    """Reparameterised draw ``mu + sigma * eps``, ``eps`` from ``rng``."""
    eps = torch.randn(params.mu.shape, generator=rng, dtype=params.mu.dtype,
                      device=params.mu.device)
    return params.mu + temperature * params.sigma * eps


def pyramid_accumulate(v_below, residual):
    if v_below is None:
        return residual
    up = upsample_velocity(v_below)
    if up.shape != residual.shape:
        raise ValueError(f"upsampled {tuple(up.shape)} does not match residual {tuple(residual.shape)}")
    return up + residual


def make_feedback(z, v, phi, f_hat):
    # displacement-valued channels double with the grid
    return torch.cat([upsample(z), upsample_velocity(v), upsample_velocity(phi), upsample(f_hat)], dim=1)


class PyramidRegistrationNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        D, K, L = config.ndim, config.levels, config.latent_levels
        ch = [config.channels(k) for k in range(K)]
        fb = config.feedback_channels()

        self.encoder = nn.ModuleList(
            [ConvBlock(D, 2 if k == 0 else ch[k - 1], ch[k]) for k in range(K)])
        # deterministic levels below the latent hierarchy, U-Net style
        self.context = nn.ModuleDict()
        for k in range(K - 1, L - 1, -1):
            c_in = ch[k] + (ch[k + 1] if k < K - 1 else 0)
            self.context[str(k)] = ConvBlock(D, c_in, ch[k])

        self.posterior = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for l in range(L):
            c_in = ch[l]
            if l == L - 1:
                c_in += ch[L] if L < K else 0
            else:
                c_in += fb
            self.posterior.append(PosteriorHead(D, c_in, ch[l], config.latent_channels))
            dec_in = config.latent_channels + (fb if l < L - 1 else 0)
            self.decoder.append(VelocityHead(D, dec_in, ch[l]))

    def _check_inputs(self, m, f):
        if m.shape != f.shape:
            raise ValueError(f"moving {tuple(m.shape)} and fixed {tuple(f.shape)} differ")
        if m.dim() != self.config.ndim + 2 or m.shape[1] != 1:
            raise ValueError(f"expected (B, 1, *S) with {self.config.ndim} spatial axes")
        bad = [s for s in m.shape[2:] if s % self.config.divisor]
        if bad:
            raise ValueError(f"spatial extents must be divisible by {self.config.divisor}")

    def encode(self, m, f):
        """Feature grids for levels ``0..K-1``; level ``k`` at ``1/2^k`` resolution."""
        self._check_inputs(m, f)
        feats = []
        h = torch.cat([m, f], dim=1)
        for k, block in enumerate(self.encoder):
            if k > 0:
                h = downsample(h)
            h = block(h)
            feats.append(h)
        return feats

    def _context(self, feats):
        K, L = self.config.levels, self.config.latent_levels
        ctx = None
        for k in range(K - 1, L - 1, -1):
            x = feats[k] if ctx is None else torch.cat([feats[k], upsample(ctx)], dim=1)
            ctx = self.context[str(k)](x)
        return ctx

    def posterior_params(self, level, features, feedback=None):
        L = self.config.latent_levels
        if level < L - 1 and feedback is None:
            raise ValueError(f"level {level} needs feedback from level {level + 1}")
        if level == L - 1 and feedback is not None:
            raise ValueError("the coarsest latent level takes no feedback")
        x = features if feedback is None else torch.cat([features, feedback], dim=1)
        return self.posterior[level](x)

    def decode_velocity(self, level, z, feedback=None):
        x = z if feedback is None else torch.cat([z, feedback], dim=1)
        return self.decoder[level](x)

    def forward(self, m, f, mode="sample", rng=None, temperature=1.0):
        if mode not in ("sample", "mean"):
            raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
        if mode == "sample" and rng is None:
            raise ValueError("sample mode needs an explicit torch.Generator")
        cfg = self.config
        L = cfg.latent_levels
        feats = self.encode(m, f)
        ctx = self._context(feats)
        m_pyr = [m]
        for _ in range(1, L):
            m_pyr.append(downsample(m_pyr[-1]))

        levels = [None] * L
        feedback = None
        v_below = None
        for l in range(L - 1, -1, -1):
            features = feats[l]
            if l == L - 1 and ctx is not None:
                features = torch.cat([features, upsample(ctx)], dim=1)
            post = self.posterior_params(l, features, feedback)
            stochastic = mode == "sample" and (not cfg.nonhierarchical_ablation or l == 0)
            z = sample_latent(post, rng, temperature) if stochastic else post.mu
            residual = self.decode_velocity(l, z, feedback)
            if cfg.nonhierarchical_ablation and l == 0:
                v = residual
            else:
                v = pyramid_accumulate(v_below, residual)
            phi = integrate_svf(v, cfg.integration_steps)
            f_hat = warp(m_pyr[l], phi)
            levels[l] = Level(post, z, residual, v, phi, f_hat)
            if l > 0:
                feedback = make_feedback(z, v, phi, f_hat)
            v_below = v
        return LevelOutputs(levels, L, cfg.nonhierarchical_ablation)


def build_model(config: ModelConfig):
    torch.manual_seed(config.seed)
    return PyramidRegistrationNet(config)


def state_fingerprint(model):
    """Short content hash of the parameters, used as a checkpoint id."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, model, optimizer_state=None, epoch=0, step=0, seed=0, extra=None):
    for name, t in model.state_dict().items():
        if t.is_floating_point() and not torch.isfinite(t).all():
            raise ValueError(f"refusing to checkpoint non-finite parameter {name}")
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
        "optimizer": optimizer_state,
        "epoch": epoch,
        "step": step,
        "seed": seed,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, payload)``; the model is in eval mode."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    config = ModelConfig(**payload["model_config"])
    dtype = next(iter(payload["state_dict"].values())).dtype
    # cast before loading so double-precision weights are not rounded through float32
    model = PyramidRegistrationNet(config).to(dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    model.checkpoint_id = state_fingerprint(model)
    return model, payload
