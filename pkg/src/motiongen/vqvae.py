"""Convolutional motion tokenizer: encoder/decoder around the codebook,
reconstruction + velocity objective, and the two-phase training loop.

The encoder stacks stride-2 convolutions with dilated residual blocks
(downsampling rate 2^levels); the decoder mirrors it with nearest-neighbor
upsampling. Defaults follow the full-size recipe; `desk_config` gives the
laptop-scale preset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalError
from .motion import FeatureStats, crop_or_tile, velocity
from .nn import tensor as T
from .nn.layers import Conv1d, Module
from .nn.optim import AdamW
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .quantizer import Codebook, collapse_stats, ema_update, quantize, straight_through, tick_reset, vq_losses
from .seeding import substream

RECON_KINDS = {"l1": T.l1_loss, "l1_smooth": T.smooth_l1, "l2": T.mse_loss}


@dataclass
class VqVaeConfig:
    input_dim: int
    width: int = 512
    levels: int = 2  # downsampling rate is 2**levels
    dilation_rates: tuple = (9, 3, 1)
    num_codes: int = 512
    code_dim: int = 512
    beta: float = 0.02
    alpha: float = 0.5
    recon_kind: str = "l1_smooth"
    ema: bool = True
    reset: bool = True
    ema_lambda: float = 0.99
    reset_window: int = 256
    crop_len: int = 64
    batch_size: int = 256
    lr_phase1: float = 2e-4
    steps_phase1: int = 200_000
    lr_phase2: float = 1e-5
    steps_phase2: int = 100_000
    adam_betas: tuple = (0.9, 0.99)
    weight_decay: float = 0.0
    eval_interval: int = 500
    log_interval: int = 50

    def __post_init__(self):
        if self.recon_kind not in RECON_KINDS:
            raise ConfigError(f"recon_kind must be one of {sorted(RECON_KINDS)}, got {self.recon_kind!r}")
        if len(self.dilation_rates) != 3:
            raise ConfigError(f"dilation_rates must have length 3, got {self.dilation_rates}")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.crop_len % self.downsample != 0:
            raise ConfigError(
                f"crop_len {self.crop_len} not divisible by downsampling rate {self.downsample}"
            )

    @property
    def downsample(self):
        return 2**self.levels


def desk_config(input_dim, **overrides):
    """Laptop-scale defaults; the full-size values stay reachable via overrides."""
    base = dict(
        width=128,
        num_codes=128,
        code_dim=128,
        batch_size=32,
        steps_phase1=4000,
        steps_phase2=2000,
        eval_interval=500,
    )
    base.update(overrides)
    return VqVaeConfig(input_dim=input_dim, **base)


class ResConvBlock(Module):
    """Residual unit: ReLU, dilated k=3 conv, ReLU, k=1 conv, skip add."""

    def __init__(self, width, dilation, rng):
        self.conv1 = Conv1d(width, width, 3, rng, padding=dilation, dilation=dilation)
        self.conv2 = Conv1d(width, width, 1, rng)

    def __call__(self, x):
        h = self.conv1(T.relu(x))
        h = self.conv2(T.relu(h))
        return T.add(x, h)


class ResStack(Module):
    def __init__(self, width, dilations, rng):
        self.blocks = [ResConvBlock(width, d, rng) for d in dilations]

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class Encoder(Module):
    def __init__(self, cfg, rng):
        w = cfg.width
        self.conv_in = Conv1d(cfg.input_dim, w, 3, rng, padding=1)
        self.downs = [Conv1d(w, w, 4, rng, stride=2, padding=1) for _ in range(cfg.levels)]
        self.stacks = [ResStack(w, cfg.dilation_rates, rng) for _ in range(cfg.levels)]
        self.proj = Conv1d(w, cfg.code_dim, 1, rng) if cfg.code_dim != w else None

    def __call__(self, x):
        h = T.relu(self.conv_in(x))
        for down, stack in zip(self.downs, self.stacks):
            h = stack(down(h))
        if self.proj is not None:
            h = self.proj(h)
        return h


class Decoder(Module):
    def __init__(self, cfg, rng):
        w = cfg.width
        self.proj = Conv1d(cfg.code_dim, w, 1, rng) if cfg.code_dim != w else None
        self.convs_a = [Conv1d(w, w, 3, rng, padding=1) for _ in range(cfg.levels)]
        self.stacks = [ResStack(w, cfg.dilation_rates, rng) for _ in range(cfg.levels)]
        self.convs_b = [Conv1d(w, w, 3, rng, padding=1) for _ in range(cfg.levels)]
        self.conv_out = Conv1d(w, cfg.input_dim, 3, rng, padding=1)

    def __call__(self, z):
        h = z if self.proj is None else self.proj(z)
        for conv_a, stack, conv_b in zip(self.convs_a, self.stacks, self.convs_b):
            h = stack(conv_a(h))
            h = T.upsample_nearest(h, 2)
            h = conv_b(h)
        return self.conv_out(T.relu(h))


class VqVaeModel:
    """Encoder, decoder and codebook with shape contracts on the time axis."""

    def __init__(self, config, init_rng=None):
        self.config = config
        rng = init_rng if init_rng is not None else np.random.default_rng(0)
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.codebook = Codebook(
            config.num_codes,
            config.code_dim,
            ema=config.ema,
            reset=config.reset,
            ema_lambda=config.ema_lambda,
            reset_window=config.reset_window,
            dtype=T.default_dtype(),
        )

    @property
    def downsample(self):
        return self.config.downsample

    def encode(self, x):
        """(N, D, T) -> (N, code_dim, T / downsample); T must divide evenly."""
        t = x.shape[-1]
        if t % self.downsample != 0:
            raise T.ShapeError(
                f"encode: sequence length {t} not divisible by downsampling rate {self.downsample}"
            )
        return self.encoder(x)

    def decode(self, zq):
        return self.decoder(zq)

    def named_params(self):
        out = self.encoder.named_params("encoder")
        out.update(self.decoder.named_params("decoder"))
        out.update(self.codebook.trainable_params())
        return out

    def state_arrays(self):
        out = {n: p.data for n, p in self.encoder.named_params("encoder").items()}
        out.update({n: p.data for n, p in self.decoder.named_params("decoder").items()})
        out.update(self.codebook.state_arrays())
        return out

    def load_state_arrays(self, arrays):
        for name, p in {
            **self.encoder.named_params("encoder"),
            **self.decoder.named_params("decoder"),
        }.items():
            p.data = arrays[name].astype(p.data.dtype, copy=True)
        self.codebook.load_state_arrays(arrays)


def reconstruction_loss(x, x_re, alpha, kind="l1_smooth"):
    """kind(x, x_re) + alpha * kind(velocity(x), velocity(x_re)) over (.., D, T)."""
    loss_fn = RECON_KINDS[kind]
    base = loss_fn(x, x_re)
    if alpha == 0.0:
        return base
    vx = T.sub(x[..., 1:], x[..., :-1])
    vr = T.sub(x_re[..., 1:], x_re[..., :-1])
    return T.add(base, T.mul(loss_fn(vx, vr), float(alpha)))


def _quantize_latent(model, z):
    """Flatten (N, d_c, L) latents to rows, quantize, return pieces for the losses."""
    n, dc, ln = z.shape
    z_rows = T.transpose(z, (0, 2, 1)).reshape((n * ln, dc))
    indices, zq = quantize(z_rows.data, model.codebook)
    return z_rows, indices, zq


def vqvae_train_step(model, batch_xt, optimizer, reset_rng, usage_hist=None):
    """One optimization step on a (N, D, T) batch tensor; returns loss parts."""
    cfg = model.config
    cb = model.codebook
    z = model.encode(batch_xt)
    n, dc, ln = z.shape
    z_rows, indices, zq = _quantize_latent(model, z)
    if usage_hist is not None:
        np.add.at(usage_hist, indices, 1)

    zq_lookup = T.embedding_lookup(cb.codes, indices)
    embed, commit = vq_losses(z_rows, zq_lookup, cfg.beta, cb.ema)
    st = straight_through(z_rows, zq)
    st = T.transpose(st.reshape((n, ln, dc)), (0, 2, 1))
    x_re = model.decode(st)
    recon = reconstruction_loss(batch_xt, x_re, cfg.alpha, cfg.recon_kind)
    total = T.add(T.add(recon, embed), commit)

    if not np.isfinite(total.data):
        raise NumericalError(
            f"non-finite loss: recon={float(recon.data)} embed={float(embed.data)} "
            f"commit={float(commit.data)}"
        )
    optimizer.zero_grad()
    total.backward()
    optimizer.step()

    if cb.ema:
        ema_update(cb, z_rows.data, indices)
    n_reset = tick_reset(cb, z_rows.data, reset_rng)

    residual = float(np.linalg.norm(z_rows.data - zq, axis=1).mean())
    return {
        "total": float(total.data),
        "recon": float(recon.data),
        "embed": float(embed.data),
        "commit": float(commit.data),
        "residual": residual,
        "n_reset": n_reset,
    }


@dataclass
class VqVaeTrainResult:
    arrays: dict
    meta: dict
    log: list
    stats: FeatureStats
    best_metric: float


def _batch_features(features_list, batch_size, crop_len, rng):
    picks = rng.integers(0, len(features_list), size=batch_size)
    crops = [crop_or_tile(features_list[i], crop_len, rng) for i in picks]
    return np.stack(crops)


def reconstruct_features(model, stats, features):
    """Round-trip one (T, D) feature array through encode/quantize/decode."""
    t = (features.shape[0] // model.downsample) * model.downsample
    if t == 0:
        raise ValueError(f"sequence of {features.shape[0]} frames shorter than one code")
    x = stats.normalize(features[:t]).astype(model.codebook.codes.data.dtype)
    with T.no_grad():
        xt = T.Tensor(x.T[None])
        z = model.encode(xt)
        _, indices, zq = _quantize_latent(model, z)
        st = T.transpose(T.Tensor(zq).reshape((1, z.shape[2], z.shape[1])), (0, 2, 1))
        out = model.decode(st)
    return stats.denormalize(out.data[0].T)


def tokenize(model, stats, features):
    """Map a (T, D) feature array to its code index sequence (no END token)."""
    t = (features.shape[0] // model.downsample) * model.downsample
    if t == 0:
        raise ValueError(f"sequence of {features.shape[0]} frames shorter than one code")
    x = stats.normalize(features[:t]).astype(model.codebook.codes.data.dtype)
    with T.no_grad():
        z = model.encode(T.Tensor(x.T[None]))
    z_rows = z.data.transpose(0, 2, 1).reshape(-1, model.config.code_dim)
    indices, _ = quantize(z_rows, model.codebook, update_usage=False)
    return indices.tolist()


def train_vqvae(config, corpus, seed, evaluator=None, log_cb=None):
    """Two-phase AdamW training; keeps the checkpoint with the best validation
    score (reconstruction FID when an evaluator is given, else val recon loss)."""
    train = corpus.split_samples("train")
    if not train:
        raise ConfigError("corpus has an empty train split")
    if corpus.feature_dim != config.input_dim:
        raise ConfigError(
            f"config input_dim {config.input_dim} != corpus feature dim {corpus.feature_dim}"
        )
    stats = FeatureStats.fit([s.motion.features for s in train])
    feats = [stats.normalize(s.motion.features).astype(T.default_dtype()) for s in train]
    val = corpus.split_samples("val") or corpus.split_samples("test")

    init_rng = substream(seed, "init/vqvae")
    batch_rng = substream(seed, "data/vqvae-batch")
    reset_rng = substream(seed, "data/code-reset")

    model = VqVaeModel(config, init_rng)
    optimizer = AdamW(
        model.named_params(),
        lr=config.lr_phase1,
        betas=config.adam_betas,
        weight_decay=config.weight_decay,
    )

    total_steps = config.steps_phase1 + config.steps_phase2
    usage_hist = np.zeros(config.num_codes, dtype=np.int64)
    log = []
    best_metric = np.inf
    best_arrays = None
    initial_loss = None
    bad_streak = 0

    for step in range(total_steps):
        optimizer.lr = config.lr_phase1 if step < config.steps_phase1 else config.lr_phase2
        batch = _batch_features(feats, config.batch_size, config.crop_len, batch_rng)
        xt = T.Tensor(batch.transpose(0, 2, 1))
        if step == 0:
            with T.no_grad():
                z0 = model.encode(xt)
            rows = z0.data.transpose(0, 2, 1).reshape(-1, config.code_dim)
            model.codebook.init_from(rows, init_rng)
        parts = vqvae_train_step(model, xt, optimizer, reset_rng, usage_hist)

        if initial_loss is None:
            initial_loss = parts["total"]
        bad_streak = bad_streak + 1 if parts["total"] > 10.0 * initial_loss else 0
        if bad_streak >= 100:
            raise NumericalError(
                f"divergence: loss {parts['total']:.4g} above 10x initial for 100 steps"
            )

        if (step + 1) % config.log_interval == 0 or step == total_steps - 1:
            row = {
                "step": step + 1,
                "lr": optimizer.lr,
                **{k: parts[k] for k in ("total", "recon", "embed", "commit", "residual")},
                "active_fraction": float((usage_hist > 0).mean()),
                "n_reset": parts["n_reset"],
            }
            usage_hist[:] = 0
            log.append(row)
            if log_cb:
                log_cb(row)

        if (step + 1) % config.eval_interval == 0 or step == total_steps - 1:
            metric = _validation_metric(model, stats, val, evaluator)
            if metric <= best_metric:
                best_metric = metric
                best_arrays = {k: v.copy() for k, v in model.state_arrays().items()}

    arrays = best_arrays if best_arrays is not None else model.state_arrays()
    arrays = dict(arrays)
    arrays["norm.mean"] = stats.mean.copy()
    arrays["norm.std"] = stats.std.copy()
    meta = {
        "kind": "vqvae",
        "seed": int(seed),
        "config": _config_meta(config),
        "corpus": {"joint_count": corpus.joint_count, "fps": corpus.fps},
        "best_metric": float(best_metric) if np.isfinite(best_metric) else None,
    }
    return VqVaeTrainResult(arrays=arrays, meta=meta, log=log, stats=stats, best_metric=best_metric)


def _validation_metric(model, stats, val_samples, evaluator):
    if not val_samples:
        return np.inf
    recons = []
    for s in val_samples:
        recons.append(reconstruct_features(model, stats, s.motion.features))
    if evaluator is not None:
        from .metrics import fid  # local import to avoid a cycle

        f_real = evaluator.motion_features([s.motion.features for s in val_samples])
        f_rec = evaluator.motion_features(recons)
        return float(fid(f_real, f_rec))
    err = 0.0
    for s, r in zip(val_samples, recons):
        t = r.shape[0]
        err += float(np.abs(s.motion.features[:t] - r).mean())
    return err / len(val_samples)


def _config_meta(config):
    d = {k: getattr(config, k) for k in config.__dataclass_fields__}
    d["dilation_rates"] = list(d["dilation_rates"])
    d["adam_betas"] = list(d["adam_betas"])
    return d


def config_from_meta(meta):
    d = dict(meta["config"])
    d["dilation_rates"] = tuple(d["dilation_rates"])
    d["adam_betas"] = tuple(d["adam_betas"])
    return VqVaeConfig(**d)


def save_vqvae(path, result):
    return save_checkpoint(path, result.arrays, result.meta)


def load_vqvae(path):
    """Rebuild (model, stats, meta) from a checkpoint directory."""
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "vqvae":
        raise ConfigError(f"{path} is not a vqvae checkpoint")
    config = config_from_meta(meta)
    model = VqVaeModel(config)
    model.load_state_arrays(arrays)
    stats = FeatureStats(arrays["norm.mean"].astype(np.float64), arrays["norm.std"].astype(np.float64))
    return model, stats, meta
