"""Seeded, checkpointed training loop."""

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
import yaml

from .data import make_pairs
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .objective import LossWeights, total_loss

log = logging.getLogger(__name__)

CONFIG_SCHEMA = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, term, step):
        super().__init__(f"non-finite loss term {term!r} at step {step}")
        self.term = term
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-4
    pairing: str = "inter"
    seed: int = 0
    checkpoint_interval: int = 10
    validation_interval: int = 10
    grad_clip: float = 1.0
    kl_warmup_epochs: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.pairing not in ("inter", "intra"):
            raise ValueError("pairing must be 'inter' or 'intra'")
        if self.kl_warmup_epochs < 0:
            raise ValueError("kl_warmup_epochs must be non-negative")

    def to_dict(self):
        return {"schema": CONFIG_SCHEMA, **asdict(self)}

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        schema = doc.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"unsupported config schema {schema!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


def load_config(path):
    with open(path) as fh:
        return TrainConfig.from_dict(yaml.safe_load(fh) or {})


def save_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


def smoke_config(**overrides):
    """Desk-scale 2D configuration used by the synthetic end-to-end runs."""
    base = dict(epochs=100, batch_size=8, learning_rate=1e-3, pairing="intra", kl_warmup_epochs=5.0,
                checkpoint_interval=10, validation_interval=10,
                model=ModelConfig(ndim=2, base_channels=8))
    base.update(overrides)
    return TrainConfig(**base)


def log_columns(latent_levels):
    cols = ["step", "epoch", "total"]
    for term in ("kl", "ncc", "reg"):
        cols += [f"{term}_l{l}" for l in range(latent_levels)]
    return cols + ["wall_time_s"]


def _step_generator(seed, step):
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, step]).generate_state(1)[0]))


def kl_scale(step, steps_per_epoch, warmup_epochs):
    """Linear ramp of the KL weight from 0 to 1 over the first ``warmup_epochs``."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, step / (warmup_epochs * steps_per_epoch))


def _batch(pairs, dtype):
    m = torch.cat([p[0].image.tensor(dtype) for p in pairs])
    f = torch.cat([p[1].image.tensor(dtype) for p in pairs])
    return m, f


def epoch_pairs(subjects, config, epoch):
    pairs = make_pairs(subjects, config.pairing, seed=[config.seed, epoch])
    if config.pairing == "inter":
        pairs = pairs[: len(subjects)]
    return pairs


def train(config, subjects, out_dir, resume=None, val_subjects=None, dtype=torch.float32,
          on_step=None):
    """Train from scratch (or from ``resume``) and return ``(model, history)``.

    ``history`` holds one dict per optimisation step (the CSV log rows) and,
    under ``"validation"``, one metric row per validation epoch.
    """
    if not subjects:
        raise ValueError("empty training set")
    os.makedirs(out_dir, exist_ok=True)
    L = config.model.latent_levels
    columns = log_columns(L)
    log_path = os.path.join(out_dir, "train_log.csv")

    start_epoch, step = 0, 0
    model = build_model(config.model).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    if resume is not None:
        loaded, payload = load_checkpoint(resume)
        model.load_state_dict(loaded.state_dict())
        if payload.get("optimizer") is not None:
            optimizer.load_state_dict(payload["optimizer"])
        start_epoch, step = payload["epoch"], payload["step"]
        log.info("resuming from %s at epoch %d", resume, start_epoch)
    else:
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(columns)

    history = {"steps": [], "validation": []}
    t0 = time.time()
    for epoch in range(start_epoch, config.epochs):
        model.train()
        pairs = epoch_pairs(subjects, config, epoch)
        for i in range(0, len(pairs), config.batch_size):
            m, f = _batch(pairs[i:i + config.batch_size], dtype)
            rng = _step_generator(config.seed, step)
            out = model(m, f, mode="sample", rng=rng)
            scale = kl_scale(step, -(-len(pairs) // config.batch_size), config.kl_warmup_epochs)
            weights = replace(config.weights, beta=config.weights.beta * scale)
            loss, parts = total_loss(out, m, f, weights)
            for name, value in parts.items():
                if not torch.isfinite(value):
                    raise NonFiniteLossError(name, step)
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            row = {"step": step, "epoch": epoch, "total": loss.item()}
            for term in ("kl", "ncc", "reg"):
                for l in range(L):
                    row[f"{term}_l{l}"] = float(parts[f"{term}_l{l}"].detach())
            row["wall_time_s"] = round(time.time() - t0, 3)
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in columns])
            history["steps"].append(row)
            if on_step is not None:
                on_step(row)
            step += 1

        done = epoch + 1
        if val_subjects and (done % config.validation_interval == 0 or done == config.epochs):
            row = validate(model, val_subjects, config)
            row["epoch"] = done
            history["validation"].append(row)
            log.info("epoch %d validation %s", done, row)
        if done % config.checkpoint_interval == 0 or done == config.epochs:
            path = os.path.join(out_dir, f"checkpoint_epoch{done:04d}.pt")
            save_checkpoint(path, model, optimizer.state_dict(), epoch=done, step=step,
                            seed=config.seed, extra={"train_config": config.to_dict()})
            save_checkpoint(os.path.join(out_dir, "checkpoint_last.pt"), model,
                            optimizer.state_dict(), epoch=done, step=step, seed=config.seed,
                            extra={"train_config": config.to_dict()})
    model.eval()
    return model, history


def validate(model, subjects, config):
    """Mean metric row over the validation pairs (MAP registration)."""
    from .inference import register_map
    from .metrics import evaluate_pair

    pairs = make_pairs(subjects, config.pairing, seed=config.seed)
    if config.pairing == "inter":
        pairs = pairs[: len(subjects)]
    rows = []
    was_training = model.training
    model.eval()
    for moving, fixed in pairs:
        result = register_map(model, moving.image, fixed.image)
        rows.append(evaluate_pair(moving, fixed, result))
    model.train(was_training)
    keys = [k for k in rows[0] if isinstance(rows[0][k], float)]
    summary = {}
    for k in keys:
        values = np.array([r[k] for r in rows], dtype=np.float64)
        # metrics absent for every pair (e.g. no landmarks) stay nan
        summary[k] = float(np.nanmean(values)) if np.isfinite(values).any() else float("nan")
    return summary
