"""Composite loss, Adam, and the two training protocols: Gaussian denoising
pretraining on textures and fine-tuning on (low-dose FBP, ground truth) pairs."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from . import data, metrics
from .denoiser import Denoiser, DenoiserConfig, Scratch, build, forward_batch
from .errors import ConfigError, DataError, TrainingError
from .tomo import crop_back, pad_record

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 5.0
    lam: float = 1e-5
    lr0: float = 1e-4
    lr_halving_period: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 48
    batch_size: int = 8
    rotations_enabled: bool = True
    noise_aug_sigmas: tuple = (0.0, 0.01)
    seed: int = 0
    # data range of the SSIM term inside the loss; None uses each ground
    # truth's max - min, the same policy as the reported SSIM
    ssim_range: float | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ConfigError("alpha and lambda must be non-negative")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.lr_halving_period < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr_halving_period >= 1 required")
        if self.ssim_range is not None and not self.ssim_range > 0:
            raise ConfigError("ssim_range must be positive or null")
        if not self.noise_aug_sigmas or any(s < 0 for s in self.noise_aug_sigmas):
            raise ConfigError("noise_aug_sigmas must be a non-empty list of non-negative values")
        object.__setattr__(self, "noise_aug_sigmas", tuple(float(s) for s in self.noise_aug_sigmas))

    def to_dict(self):
        d = asdict(self)
        d["noise_aug_sigmas"] = list(self.noise_aug_sigmas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def learning_rate(epoch, cfg: TrainConfig):
    return cfg.lr0 * 2.0 ** (-(epoch // cfg.lr_halving_period))


def l2_penalty(model):
    return sum((p * p).sum() for p in model.parameters())


def gt_ranges(gt):
    """Per-image max - min of a (B, 1, H, W) batch, 1.0 where the image is constant."""
    flat = gt.detach().flatten(1)
    r = flat.max(dim=1).values - flat.min(dim=1).values
    return torch.where(r > 0, r, torch.ones_like(r)).view(-1, 1, 1, 1)


def composite_loss(pred, gt, model, alpha, lam, ssim_range=None):
    """Batch mean of MAE + alpha * (1 - SSIM), plus lam * sum(theta^2)."""
    mae = (pred - gt).abs().mean(dim=(1, 2, 3))
    total = mae
    if alpha:
        data_range = gt_ranges(gt) if ssim_range is None else ssim_range
        total = total + alpha * (1 - metrics.batch_ssim(pred, gt, data_range))
    total = total.mean()
    if lam and model is not None:
        total = total + lam * l2_penalty(model)
    return total


def loss(pred, gt, model, alpha, lam, ssim_range=None):
    """Scalar loss for single images or stacks given as arrays, in float64."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = torch.from_numpy(pred).reshape(-1, 1, *pred.shape[-2:])
    g = torch.from_numpy(gt).reshape(-1, 1, *gt.shape[-2:])
    with torch.no_grad():
        value = composite_loss(p, g, None, alpha, 0.0, ssim_range)
        if lam and model is not None:
            value = value + lam * sum((q.double() ** 2).sum() for q in model.parameters())
    return float(value)


def _to_batch(images, dtype):
    return torch.from_numpy(np.ascontiguousarray(images)).to(dtype)[:, None]


def predict(model: Denoiser, x):
    """Differentiable padded forward on a (B, 1, H, W) tensor."""
    rec = pad_record(x.shape[-2:], model.config.input_multiple)
    if rec.empty:
        return model(x)
    return crop_back(model(torch_mirror_pad(x, rec)), rec)


def torch_mirror_pad(x, rec):
    """Symmetric padding matching ``np.pad(mode="symmetric")``, as an index gather."""
    def reflect(t, before, after, dim):
        if before == 0 and after == 0:
            return t
        n = t.shape[dim]
        idx = np.concatenate([np.arange(before)[::-1], np.arange(n), n - 1 - np.arange(after)]) % n
        return t.index_select(dim, torch.from_numpy(idx))
    return reflect(reflect(x, rec.top, rec.bottom, 2), rec.left, rec.right, 3)


def loss_gradients(model: Denoiser, inputs, gts, cfg: TrainConfig):
    """Loss value and ``{parameter name: gradient}`` in layer-table order."""
    if len(inputs) == 0:
        raise DataError("empty batch")
    dtype = next(model.parameters()).dtype
    x = inputs if torch.is_tensor(inputs) else _to_batch(inputs, dtype)
    y = gts if torch.is_tensor(gts) else _to_batch(gts, dtype)
    model.zero_grad(set_to_none=True)
    value = composite_loss(predict(model, x), y, model, cfg.alpha, cfg.lam, cfg.ssim_range)
    if not torch.isfinite(value):
        raise TrainingError("non-finite loss", layer="loss")
    value.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.all(torch.isfinite(g)):
            raise TrainingError("non-finite gradient", layer=name)
        grads[name] = g
    return float(value.detach()), grads


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` (name -> tensor)."""
    state.step += 1
    t = state.step
    bc1 = 1 - beta1 ** t
    bc2 = 1 - beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    psnr: float
    ssim: float
    lr: float
    seconds: float


HISTORY_COLUMNS = ("epoch", "loss", "psnr", "ssim", "lr", "seconds")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    baseline: dict = field(default_factory=dict)  # identity-model validation metrics
    best_epoch: int | None = None

    def to_csv(self, with_time=True):
        cols = HISTORY_COLUMNS if with_time else HISTORY_COLUMNS[:-1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            w.writerow([repr(getattr(r, c)) for c in cols])
        return buf.getvalue()

    def column(self, name):
        return [getattr(r, name) for r in self.records]


def validate(model, inputs, gts):
    """Mean PSNR / SSIM (ground-truth range) of the model on a held-out set."""
    preds = forward_batch(model, inputs)
    return _mean_metrics(preds, gts)


def _mean_metrics(preds, gts):
    ps, ss = [], []
    for p, g in zip(preds, gts):
        r = metrics.gt_range(g) or 1.0
        ps.append(metrics.psnr(p, g, r))
        ss.append(metrics.ssim(p, g, metrics.SsimParams(data_range=r)))
    return float(np.mean(ps)), float(np.mean(ss))


def _fit(model, inputs, gts, val_inputs, val_gts, cfg: TrainConfig, views, baseline_inputs=None):
    """Shared loop.  ``views(rng)`` lists the epoch's (index, noise sigma) samples."""
    history = TrainHistory()
    if len(val_inputs):
        base = baseline_inputs if baseline_inputs is not None else val_inputs
        p, s = _mean_metrics(base, val_gts)
        history.baseline = {"psnr": p, "ssim": s}
    if cfg.epochs == 0:
        return model, history
    params = dict(model.named_parameters())
    state = AdamState()
    best_key, best_state = None, None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        samples = views(rng)
        order = rng.permutation(len(samples))
        lr = learning_rate(epoch, cfg)
        losses = []
        model.train()
        for start in range(0, len(order), cfg.batch_size):
            xs, ys = [], []
            for j in order[start:start + cfg.batch_size]:
                idx, sigma = samples[j]
                noise_seed = int(rng.integers(2**63))
                k = int(rng.integers(4)) if cfg.rotations_enabled else 0
                x = data.augment_noise(inputs[idx], sigma, noise_seed)
                x, y = data.augment_rotate((x, gts[idx]), k)
                xs.append(x)
                ys.append(y)
            value, grads = loss_gradients(model, np.stack(xs).astype(np.float32),
                                          np.stack(ys).astype(np.float32), cfg)
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_epsilon)
            losses.append(value)
        model.eval()
        if len(val_inputs):
            v_psnr, v_ssim = validate(model, val_inputs, val_gts)
        else:
            v_psnr, v_ssim = math.nan, math.nan
        rec = EpochRecord(epoch, float(np.mean(losses)), v_psnr, v_ssim, lr,
                          time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.5f psnr %.3f ssim %.4f lr %.2e", epoch, rec.loss, v_psnr, v_ssim, lr)
        key = (v_ssim, v_psnr) if len(val_inputs) else (epoch,)
        if best_key is None or key > best_key:
            best_key, best_state = key, copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
    model.load_state_dict(best_state)
    return model, history


def _as_float32(a):
    return np.asarray(a, dtype=np.float32)


def finetune(cfg: TrainConfig, init, train, val, denoiser_config: DenoiserConfig | None = None):
    """Fine-tune on paired (input, ground truth) arrays.

    ``init`` is a :class:`Scratch`/:class:`Pretrained` mode or an already built
    model; ``train`` and ``val`` are ``(inputs, gts)`` stacks or dataset manifests.
    Every epoch uses each training pair once per entry of ``noise_aug_sigmas``.
    """
    model = init if isinstance(init, Denoiser) else build(denoiser_config or DenoiserConfig(), init)
    tr_in, tr_gt = _unpack(train)
    va_in, va_gt = _unpack(val)
    if len(tr_in) == 0:
        raise DataError("empty training set")
    n = len(tr_in)

    def views(rng):
        return [(i, s) for s in cfg.noise_aug_sigmas for i in range(n)]

    return _fit(model, tr_in, tr_gt, va_in, va_gt, cfg, views)


def _unpack(split):
    if isinstance(split, (str, data.DatasetManifest)) or hasattr(split, "joinpath"):
        gts, inputs = data.load_arrays(split)
        return inputs, gts
    inputs, gts = split
    return _as_float32(inputs), _as_float32(gts)


@dataclass(frozen=True)
class GaussianPretrainTask:
    sigmas: tuple = (15 / 255, 25 / 255, 50 / 255)
    n_textures: int = 200
    n_val: int = 16
    size: int = 64
    texture_seed: int = 1000
    manifest: str | None = None  # optional user-supplied images instead of textures

    def __post_init__(self):
        if not self.sigmas or any(s <= 0 for s in self.sigmas):
            raise ConfigError("pretraining sigmas must be positive")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))

    def to_dict(self):
        d = asdict(self)
        d["sigmas"] = list(self.sigmas)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown pretrain task keys {sorted(unknown)}")
        return cls(**d)

    def corpus(self):
        """(train, val) clean image stacks."""
        if self.manifest:
            gts, _ = data.load_arrays(self.manifest)
            if len(gts) <= self.n_val:
                raise DataError("pretraining manifest too small for the validation split")
            return gts[self.n_val:], gts[: self.n_val]
        imgs = np.stack([
            data.generate_texture(data.TextureSpec(self.size, self.texture_seed + i))
            for i in range(self.n_textures + self.n_val)
        ]).astype(np.float32)
        return imgs[: self.n_textures], imgs[self.n_textures:]


def pretrain_gaussian(cfg: TrainConfig, task: GaussianPretrainTask,
                      denoiser_config: DenoiserConfig | None = None, init=Scratch(0)):
    """Train the denoiser to remove Gaussian noise from textures.

    Each training sample draws its sigma from ``task.sigmas`` per epoch; the
    validation set carries one fixed noise realisation per image, and
    ``history.baseline`` holds the metrics of the noisy inputs themselves.
    """
    model = init if isinstance(init, Denoiser) else build(denoiser_config or DenoiserConfig(), init)
    train, val = task.corpus()
    vrng = np.random.default_rng([task.texture_seed, 7])
    val_sigmas = vrng.choice(task.sigmas, size=len(val))
    val_noisy = np.stack([
        data.augment_noise(v, s, int(vrng.integers(2**63))) for v, s in zip(val, val_sigmas)
    ]).astype(np.float32)
    sigmas = np.asarray(task.sigmas)

    def views(rng):
        return [(i, float(s)) for i, s in enumerate(rng.choice(sigmas, size=len(train)))]

    return _fit(model, train, train, val_noisy, val, cfg, views)
