"""Desk-scale trainer: Adam with exponential LR annealing, optional GAN alternation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import engine as E
from .data import random_crop
from .metrics import (
    LossWeights,
    discriminator_loss,
    distortion_loss,
    ms_ssim,
    msssim_db,
    perc_distance,
    psnr_from_mse,
    rd_objective,
)
from .model import CodecModel
from .pipeline import forward
from .transforms import discriminator_forward

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0015, 0.0035, 0.0070, 0.0125, 0.0250, 0.0410, 0.0550)


class ConfigError(ValueError):
    """An invalid training or architecture setting; the message names the field."""


class DivergenceError(RuntimeError):
    """Training produced non-finite losses on two consecutive steps."""


@dataclass
class TrainConfig:
    lam: float = 0.0070
    recon: float = 1.0
    perc: float = 1.0
    adv: float = 0.1
    epochs: int = 30
    batch_size: int = 8
    crop: int = 64
    lr_init: float = 1e-4
    lr_final: float = 1.2e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    gan_enabled: bool = False
    gan_start_epoch: int | None = None  # default: halfway
    disc_lr: float = 1e-3  # constant; the discriminator starts from scratch mid-run

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        if not (isinstance(self.lam, (int, float)) and math.isfinite(self.lam) and self.lam > 0):
            bad("lam", "must be a positive finite number")
        for name in ("recon", "perc", "adv"):
            if getattr(self, name) < 0:
                bad(name, "must be non-negative")
        for name in ("epochs", "batch_size", "crop"):
            if int(getattr(self, name)) < 1:
                bad(name, "must be >= 1")
        if self.crop % 64:
            bad("crop", "must be a multiple of 64")
        if not 0 < self.lr_final <= self.lr_init:
            bad("lr_final", "must satisfy 0 < lr_final <= lr_init")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            bad("beta1", "Adam betas must lie in [0, 1)")
        if not self.disc_lr > 0:
            bad("disc_lr", "must be positive")
        if self.gan_start_epoch is not None and self.gan_start_epoch < 0:
            bad("gan_start_epoch", "must be >= 0")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.recon, self.perc, self.adv)

    @property
    def gan_start(self) -> int:
        return self.epochs // 2 if self.gan_start_epoch is None else self.gan_start_epoch

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """lr_init * (lr_final / lr_init) ** (step / total), with exact endpoints."""
    if total_steps <= 0 or step <= 0:
        return cfg.lr_init
    if step >= total_steps:
        return cfg.lr_final
    return cfg.lr_init * (cfg.lr_final / cfg.lr_init) ** (step / total_steps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(params: dict[str, E.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              project: Callable[[], None] | None = None) -> bool:
    """In-place bias-corrected Adam update. Returns False (and counts a skip)
    when any gradient is non-finite; ``project`` runs after a successful step."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            return False
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    if project is not None:
        project()
    return True


def _grads(params: dict[str, E.Tensor]) -> dict[str, np.ndarray]:
    return {n: p.grad for n, p in params.items() if p.grad is not None}


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    mse: float
    psnr: float
    msssim: float
    msssim_db: float
    bpp: float
    perc: float


def evaluate(model: CodecModel, images: np.ndarray, batch_size: int = 8) -> EvalResult:
    """Rounded (coding-mode) forward pass over ``images`` [n, H, W]; bpp from the model likelihoods."""
    images = np.asarray(images, dtype=np.float64)
    mses, bpps, percs, recon = [], [], [], []
    with E.no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size, None]
            res = forward(model, x)
            err = ((res.x_hat.data - x) * 255.0) ** 2
            mses.extend(err.reshape(len(x), -1).mean(axis=1))
            bpps.extend([res.bpp.item()] * len(x))
            percs.extend(perc_distance(x[j:j + 1], res.x_hat.data[j:j + 1]).item() for j in range(len(x)))
            recon.append(res.x_hat.data[:, 0])
    recon_all = np.concatenate(recon)
    m = float(np.mean([ms_ssim(a, b, allow_reduced=True) for a, b in zip(images, recon_all)]))
    mse = float(np.mean(mses))
    return EvalResult(mse, psnr_from_mse(mse), m, msssim_db(m), float(np.mean(bpps)), float(np.mean(percs)))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: CodecModel
    log: list[dict]
    skipped_steps: int


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def _json_default(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    raise TypeError(type(v))


def train(model: CodecModel, data, cfg: TrainConfig, eval_data: np.ndarray | None = None,
          log_path: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimize ``model`` in place and return it with the epoch log.

    ``data`` is an [n, H, W] array or a list of 2-D images (sizes may differ;
    each batch takes random ``cfg.crop`` squares).
    """
    data = [np.asarray(d, dtype=np.float64) for d in data]
    if not data or any(d.ndim != 2 for d in data):
        raise ValueError("training data must be a non-empty collection of 2-D images")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    gen = dict(model.generator_parameters())
    disc = dict(model.discriminator_parameters())
    g_state, d_state = AdamState(), AdamState()
    n_batches = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * n_batches
    weights = cfg.weights
    step = 0
    bad_streak = 0
    records: list[dict] = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            gan_on = cfg.gan_enabled and epoch > cfg.gan_start
            ew = weights if gan_on else LossWeights(weights.recon, weights.perc, 0.0)
            sums = dict(R_bpp=0.0, mse=0.0, perc=0.0, adv=0.0, disc_loss=0.0, disc_acc=0.0, loss=0.0)
            counted = 0
            order = rng.permutation(len(data))
            lr = lr_schedule(step, total, cfg)
            for b in range(n_batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x = np.stack([random_crop(data[i], cfg.crop, rng) for i in idx])[:, None]
                lr = lr_schedule(step, total, cfg)
                step += 1

                model.zero_grad()
                res = forward(model, x, rng)
                d_out = discriminator_forward(res.x_hat, res.y_q, model) if gan_on else None
                dist, parts = distortion_loss(x, res.x_hat, d_out, ew)
                loss = rd_objective(res.bpp, dist, cfg.lam)
                lval = loss.item()
                if not math.isfinite(lval):
                    bad_streak += 1
                    g_state.skipped += 1
                    if bad_streak >= 2:
                        raise DivergenceError(f"non-finite loss on two consecutive steps (epoch {epoch}, step {step})")
                    continue
                bad_streak = 0
                E.backward(loss)
                adam_step(gen, _grads(gen), g_state, lr, cfg.beta1, cfg.beta2, cfg.eps, project=model.project)

                d_loss_v, d_acc = 0.0, 0.0
                if gan_on:
                    model.zero_grad()
                    x_fake = E.Tensor(res.x_hat.data)
                    y_cond = E.Tensor(res.y_q.data)
                    d_real = discriminator_forward(x, y_cond, model)
                    d_fake = discriminator_forward(x_fake, y_cond, model)
                    d_loss = discriminator_loss(d_real, d_fake)
                    d_loss_v = d_loss.item()
                    d_acc = 0.5 * (float(np.mean(d_real.data > 0.5)) + float(np.mean(d_fake.data < 0.5)))
                    if math.isfinite(d_loss_v):
                        E.backward(d_loss)
                        adam_step(disc, _grads(disc), d_state, cfg.disc_lr, cfg.beta1, cfg.beta2, cfg.eps)
                    else:
                        d_state.skipped += 1

                counted += 1
                sums["R_bpp"] += res.bpp.item()
                sums["mse"] += parts["mse"]
                sums["perc"] += parts["perceptual"]
                sums["adv"] += parts["adversarial_g"]
                sums["disc_loss"] += d_loss_v
                sums["disc_acc"] += d_acc
                sums["loss"] += lval
            model.zero_grad()
            rec = {"epoch": epoch, "lr": lr}
            rec.update({k: v / max(counted, 1) for k, v in sums.items()})
            rec["gan_active"] = gan_on
            rec["skipped_steps"] = g_state.skipped + d_state.skipped
            if eval_data is not None and len(eval_data):
                ev = evaluate(model, eval_data, cfg.batch_size)
                rec.update(eval_mse=ev.mse, eval_psnr=ev.psnr, eval_msssim=ev.msssim,
                           eval_msssim_db=ev.msssim_db, eval_bpp=ev.bpp)
            records.append(rec)
            log.info("epoch %d: %s", epoch, rec)
            if fh:
                fh.write(json.dumps(rec, default=_json_default) + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(rec)
    finally:
        if fh:
            fh.close()
    return TrainResult(model, records, g_state.skipped + d_state.skipped)


def config_from_mapping(values: dict) -> TrainConfig:
    """Build a TrainConfig, rejecting unknown keys with a ConfigError."""
    unknown = set(values) - set(TrainConfig.field_names())
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown training option")
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def load_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def iter_lambdas(values: Iterable[float] | None = None) -> list[float]:
    return sorted(LAMBDA_GRID if values is None else values)
