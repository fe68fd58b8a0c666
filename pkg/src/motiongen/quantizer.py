"""Codebook learning: nearest-code assignment, straight-through gradients,
EMA cluster updates and reset of inactive codes, plus collapse diagnostics.

Four training recipes are supported through the (ema, reset) flags: with EMA
off the codebook is a gradient-trained parameter pulled by the embedding
loss; with EMA on the codebook follows decayed cluster counts/sums and the
embedding loss is dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import tensor as T


class Codebook:
    """K code vectors of dim d_c plus EMA accumulators and usage counters."""

    def __init__(self, num_codes, code_dim, ema=True, reset=True, ema_lambda=0.99,
                 count_eps=1e-5, reset_window=256, dtype=np.float32):
        if num_codes < 1:
            raise ValueError("codebook must contain at least one code")
        self.num_codes = int(num_codes)
        self.code_dim = int(code_dim)
        self.ema = bool(ema)
        self.reset = bool(reset)
        self.ema_lambda = float(ema_lambda)
        self.count_eps = float(count_eps)
        self.reset_window = int(reset_window)
        self.codes = T.Tensor(np.zeros((num_codes, code_dim), dtype=dtype), requires_grad=not ema)
        self.ema_counts = np.ones(num_codes, dtype=dtype)
        self.ema_sums = np.zeros((num_codes, code_dim), dtype=dtype)
        self.usage = np.zeros(num_codes, dtype=np.int64)
        self.updates_since_scan = 0
        self.initialized = False

    def init_from(self, z, rng):
        """Data-dependent init: sample encoder outputs without replacement."""
        z = np.asarray(z)
        if z.shape[0] >= self.num_codes:
            pick = rng.choice(z.shape[0], size=self.num_codes, replace=False)
        else:
            pick = np.concatenate(
                [np.arange(z.shape[0]), rng.choice(z.shape[0], size=self.num_codes - z.shape[0])]
            )
        self.codes.data = z[pick].astype(self.codes.data.dtype, copy=True)
        self.ema_counts[:] = 1.0
        self.ema_sums[:] = self.codes.data
        self.initialized = True

    def trainable_params(self):
        return {} if self.ema else {"codebook.codes": self.codes}

    def state_arrays(self, prefix="codebook"):
        return {
            f"{prefix}.codes": self.codes.data,
            f"{prefix}.ema_counts": self.ema_counts,
            f"{prefix}.ema_sums": self.ema_sums,
        }

    def load_state_arrays(self, arrays, prefix="codebook"):
        self.codes.data = arrays[f"{prefix}.codes"].astype(self.codes.data.dtype, copy=True)
        self.ema_counts = arrays[f"{prefix}.ema_counts"].astype(self.ema_counts.dtype, copy=True)
        self.ema_sums = arrays[f"{prefix}.ema_sums"].astype(self.ema_sums.dtype, copy=True)
        self.initialized = True


def quantize(z, cb, update_usage=True):
    """Nearest code per row of z (N, d_c): returns (indices, code rows).

    Ties break to the lowest index. Distances use the expanded form
    |z|^2 - 2 z.c + |c|^2 so large batches stay a single matmul.
    """
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != cb.code_dim:
        raise T.ShapeError(f"quantize: input shape {z.shape} incompatible with code dim {cb.code_dim}")
    codes = cb.codes.data
    d2 = (
        (z * z).sum(axis=1, keepdims=True)
        - 2.0 * (z @ codes.T)
        + (codes * codes).sum(axis=1)[None, :]
    )
    indices = np.argmin(d2, axis=1)
    if update_usage:
        np.add.at(cb.usage, indices, 1)
    return indices, codes[indices]


def straight_through(z, zq):
    """Forward the quantized values, pass gradients through to z unchanged."""
    zq_const = zq.detach() if isinstance(zq, T.Tensor) else T.Tensor(zq)
    return T.add(z, T.sub(zq_const, z.detach()))


def vq_losses(z, zq_lookup, beta, ema_enabled):
    """(embedding_loss, commitment_loss) as mean-squared errors.

    zq_lookup must be an embedding_lookup of the codebook parameter so the
    embedding term can reach the codes; with EMA on that term is dropped
    (EMA owns codebook learning) and a zero constant is returned.
    """
    commit = T.mul(T.mse_loss(z, zq_lookup.detach()), float(beta))
    if ema_enabled:
        embed = T.Tensor(np.zeros((), dtype=z.data.dtype))
    else:
        embed = T.mse_loss(zq_lookup, z.detach())
    return embed, commit


def ema_update(cb, z, indices, lam=None):
    """Decayed cluster counts/sums; codes follow sums / max(counts, eps)."""
    if not cb.ema:
        raise RuntimeError("ema_update called on a codebook with EMA disabled")
    lam = cb.ema_lambda if lam is None else float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA constant must be in [0, 1], got {lam}")
    z = np.asarray(z, dtype=cb.ema_sums.dtype)
    k = cb.num_codes
    counts = np.bincount(indices, minlength=k).astype(cb.ema_counts.dtype)
    sums = np.zeros_like(cb.ema_sums)
    np.add.at(sums, indices, z)
    if lam == 1.0:
        return  # exact no-op on codes and accumulators
    cb.ema_counts *= lam
    cb.ema_counts += (1.0 - lam) * counts
    cb.ema_sums *= lam
    cb.ema_sums += (1.0 - lam) * sums
    cb.codes.data = cb.ema_sums / np.maximum(cb.ema_counts, cb.count_eps)[:, None]


def code_reset(cb, batch_z, rng):
    """Overwrite codes unused over the last scan window with batch rows.

    Re-primes the EMA accumulators of reset codes (count 1, sum = new value)
    and clears all usage counters. Returns the number of codes reset.
    """
    batch_z = np.asarray(batch_z)
    if batch_z.shape[0] == 0:
        raise ValueError("code_reset needs a non-empty batch")
    dead = np.flatnonzero(cb.usage == 0)
    for k in dead:
        row = batch_z[int(rng.integers(0, batch_z.shape[0]))].astype(cb.codes.data.dtype)
        cb.codes.data[k] = row
        cb.ema_counts[k] = 1.0
        cb.ema_sums[k] = row
    cb.usage[:] = 0
    return int(dead.size)


def tick_reset(cb, batch_z, rng):
    """Run the reset scan once per window of update steps."""
    if not cb.reset:
        return 0
    cb.updates_since_scan += 1
    if cb.updates_since_scan < cb.reset_window:
        return 0
    cb.updates_since_scan = 0
    return code_reset(cb, batch_z, rng)


def collapse_stats(cb, dataset_z=None, batch_size=4096):
    """Active-code fraction and usage perplexity over a dataset (or the
    codebook's own usage counters when no dataset is given)."""
    if dataset_z is not None:
        dataset_z = np.asarray(dataset_z)
        hist = np.zeros(cb.num_codes, dtype=np.int64)
        for lo in range(0, dataset_z.shape[0], batch_size):
            idx, _ = quantize(dataset_z[lo : lo + batch_size], cb, update_usage=False)
            np.add.at(hist, idx, 1)
    else:
        hist = cb.usage
    total = hist.sum()
    if total == 0:
        return {"active_fraction": 0.0, "perplexity": 0.0}
    p = hist / total
    nz = p[p > 0]
    entropy = -(nz * np.log(nz)).sum()
    return {"active_fraction": float((hist > 0).mean()), "perplexity": float(np.exp(entropy))}


# -- snapshot ------------------------------------------------------------------


def save_codebook(path, cb, step=0):
    """Manifest JSON (sizes, strategy flags, step) + little-endian float blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    order = ["codes", "ema_counts", "ema_sums"]
    blobs = {
        "codes": np.ascontiguousarray(cb.codes.data, dtype="<f4"),
        "ema_counts": np.ascontiguousarray(cb.ema_counts, dtype="<f4"),
        "ema_sums": np.ascontiguousarray(cb.ema_sums, dtype="<f4"),
    }
    with open(path / "codebook.bin", "wb") as f:
        for name in order:
            f.write(blobs[name].tobytes())
    manifest = {
        "num_codes": cb.num_codes,
        "code_dim": cb.code_dim,
        "ema": cb.ema,
        "reset": cb.reset,
        "ema_lambda": cb.ema_lambda,
        "step": int(step),
        "order": order,
    }
    (path / "codebook.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_codebook(path):
    path = Path(path)
    m = json.loads((path / "codebook.json").read_text())
    cb = Codebook(m["num_codes"], m["code_dim"], ema=m["ema"], reset=m["reset"], ema_lambda=m["ema_lambda"])
    raw = (path / "codebook.bin").read_bytes()
    k, d = m["num_codes"], m["code_dim"]
    codes = np.frombuffer(raw, dtype="<f4", count=k * d).reshape(k, d)
    counts = np.frombuffer(raw, dtype="<f4", count=k, offset=4 * k * d)
    sums = np.frombuffer(raw, dtype="<f4", count=k * d, offset=4 * (k * d + k)).reshape(k, d)
    cb.codes.data = codes.copy()
    cb.ema_counts = counts.copy()
    cb.ema_sums = sums.copy()
    cb.initialized = True
    return cb, m["step"]
