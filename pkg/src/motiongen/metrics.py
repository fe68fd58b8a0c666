"""Generation-quality metrics and the substitute feature evaluator.

The evaluator is a small contrastive text/motion embedding network trained on
the synthetic corpus; it stands in for a pretrained feature extractor and is
frozen once trained. All metrics operate on its e-dim features: Frechet
distance between Gaussian fits, retrieval precision against 32 candidate
captions, paired text-motion distance, pairwise diversity, and per-caption
multimodality of repeated stochastic generations.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .motion import FeatureStats, crop_or_tile
from .nn import tensor as T
from .nn.layers import Conv1d, Linear, Module
from .nn.optim import AdamW
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .seeding import substream
from .gpt import TextEmbedder
from .vqvae import VqVaeConfig


# -- Frechet distance ----------------------------------------------------------


def _gaussian_fit(feats, shrinkage_dim_factor=4, shrink=1e-6):
    feats = np.asarray(feats, dtype=np.float64)
    n, e = feats.shape
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    if n < shrinkage_dim_factor * e:
        cov = cov + shrink * np.eye(e)
    return mu, cov


def _sqrtm_psd(mat, tol=1e-10):
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    floor = -tol * max(1.0, float(np.abs(vals).max()))
    if vals.min() < floor:
        raise NumericalError(f"matrix not PSD after symmetrization: min eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(f_a, f_b):
    """Frechet distance between Gaussian fits of two feature sets.

    |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the matrix square
    root comes from the eigendecomposition of S_a^{1/2} S_b S_a^{1/2}.
    """
    mu_a, cov_a = _gaussian_fit(f_a)
    mu_b, cov_b = _gaussian_fit(f_b)
    a_half = _sqrtm_psd(cov_a)
    inner = a_half @ cov_b @ a_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    floor = -1e-10 * max(1.0, float(np.abs(vals).max()))
    if vals.min() < floor:
        raise NumericalError(f"cross-covariance product not PSD: min eigenvalue {vals.min():.3e}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    if d2 < -1e-8:
        raise NumericalError(f"negative Frechet distance {d2:.3e} beyond numerical floor")
    return max(d2, 0.0)


# -- retrieval / distance metrics ------------------------------------------------


def r_precision(motion_feats, text_feats, rng, pool_text_feats=None, motion_groups=None,
                pool_groups=None, n_candidates=32):
    """Top-1/2/3 retrieval accuracy of the paired caption among 32 candidates.

    For each motion the ground-truth text feature competes with 31 mismatched
    ones sampled from the pool; when group labels are given, candidates from
    the motion's own group are excluded (the templated corpus repeats captions
    within a motif).
    """
    motion_feats = np.asarray(motion_feats)
    text_feats = np.asarray(text_feats)
    if motion_feats.shape[0] != text_feats.shape[0]:
        raise ValueError("motion and text feature counts differ")
    pool = text_feats if pool_text_feats is None else np.asarray(pool_text_feats)
    pool_groups = pool_groups if pool_groups is not None else (
        motion_groups if pool is text_feats else None
    )
    hits = np.zeros(3)
    n = motion_feats.shape[0]
    for i in range(n):
        if motion_groups is not None and pool_groups is not None:
            eligible = np.flatnonzero(np.asarray(pool_groups) != motion_groups[i])
        else:
            eligible = np.delete(np.arange(pool.shape[0]), i if pool is text_feats else [])
        if eligible.size < n_candidates - 1:
            raise ValueError(
                f"need {n_candidates - 1} mismatched candidates, only {eligible.size} available"
            )
        picks = rng.choice(eligible, size=n_candidates - 1, replace=False)
        cands = np.concatenate([text_feats[i : i + 1], pool[picks]], axis=0)
        d = np.linalg.norm(cands - motion_feats[i], axis=1)
        rank = int((d < d[0]).sum())  # ties favor the ground truth; d[0] is GT
        for k in range(3):
            hits[k] += rank <= k
    return tuple(hits / n)


def mm_dist(motion_feats, text_feats):
    """Mean Euclidean distance over aligned (motion, text) feature pairs."""
    motion_feats = np.asarray(motion_feats)
    text_feats = np.asarray(text_feats)
    if motion_feats.shape[0] != text_feats.shape[0]:
        raise ValueError(
            f"paired features must match in count: {motion_feats.shape[0]} vs {text_feats.shape[0]}"
        )
    return float(np.linalg.norm(motion_feats - text_feats, axis=1).mean())


def diversity(feats, s_dis=300, rng=None):
    """Mean distance over s_dis disjoint random pairs from the set."""
    feats = np.asarray(feats)
    n = feats.shape[0]
    if n < 2:
        raise ValueError(f"diversity needs at least 2 motions, got {n}")
    if rng is None:
        rng = np.random.default_rng(0)
    if n < 2 * s_dis:
        s_dis = n // 2
        warnings.warn(f"set of {n} motions supports only {s_dis} disjoint pairs; lowering S_dis")
    pick = rng.choice(n, size=2 * s_dis, replace=False)
    a, b = feats[pick[:s_dis]], feats[pick[s_dis:]]
    return float(np.linalg.norm(a - b, axis=1).mean())


def mmodality(gen_feats_fn, captions, rng, reps=30, subset=10, mode="sample"):
    """Average distance between two disjoint generation subsets per caption.

    gen_feats_fn(caption, rng, n) must return n feature vectors from n
    independent generations. Under greedy decoding the result is 0 by
    construction, which is reported with a warning.
    """
    if mode == "greedy":
        warnings.warn("multimodality under greedy decoding is 0 by construction")
    total = 0.0
    for caption in captions:
        feats = np.asarray(gen_feats_fn(caption, rng, reps))
        perm = rng.permutation(reps)
        a = feats[perm[:subset]]
        b = feats[perm[subset : 2 * subset]]
        total += float(np.linalg.norm(a - b, axis=1).mean())
    return total / len(captions)


def spearman_rho(x, y):
    """Spearman rank correlation (average ranks on ties)."""

    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty_like(v)
        r[order] = np.arange(1, len(v) + 1)
        for val in np.unique(v):
            mask = v == val
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom else 0.0


# -- evaluator network -----------------------------------------------------------


@dataclass
class EvaluatorConfig:
    input_dim: int
    embed_dim: int = 64
    width: int = 64
    text_dim: int = 512
    crop_len: int = 48
    batch_size: int = 32
    steps: int = 600
    lr: float = 1e-3
    temperature: float = 0.07


class _MotionEncoder(Module):
    def __init__(self, cfg, rng):
        self.conv1 = Conv1d(cfg.input_dim, cfg.width, 3, rng, padding=1)
        self.conv2 = Conv1d(cfg.width, cfg.width, 4, rng, stride=2, padding=1)
        self.conv3 = Conv1d(cfg.width, cfg.width, 3, rng, padding=1)
        self.out = Linear(cfg.width, cfg.embed_dim, rng)

    def __call__(self, x):
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(h))
        h = T.relu(self.conv3(h))
        pooled = T.tmean(h, axis=2)
        return self.out(pooled)


class EvaluatorNet:
    """Frozen text/motion feature extractor used by every metric."""

    def __init__(self, config, rng=None, stats=None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.motion_enc = _MotionEncoder(config, rng)
        self.text_proj = Linear(config.text_dim, config.embed_dim, rng)
        self.stats = stats
        self.embedder = TextEmbedder(dim=config.text_dim)

    def named_params(self):
        out = self.motion_enc.named_params("motion")
        out.update(self.text_proj.named_params("text"))
        return out

    def motion_features(self, feature_arrays):
        """(N samples of (T_i, D)) -> (N, e); full length, no cropping."""
        out = np.zeros((len(feature_arrays), self.config.embed_dim), dtype=np.float64)
        with T.no_grad():
            for i, f in enumerate(feature_arrays):
                x = self.stats.normalize(np.asarray(f)).astype(np.float32)
                if x.shape[0] < 2:
                    x = np.repeat(x, 2, axis=0)
                emb = self.motion_enc(T.Tensor(x.T[None]))
                out[i] = emb.data[0]
        return out

    def text_features(self, captions):
        vecs = self.embedder.embed_many(list(captions))
        with T.no_grad():
            emb = self.text_proj(T.Tensor(vecs))
        return emb.data.astype(np.float64)

    def state_arrays(self):
        out = {n: p.data for n, p in self.named_params().items()}
        out["norm.mean"] = self.stats.mean
        out["norm.std"] = self.stats.std
        return out

    def load_state_arrays(self, arrays):
        for name, p in self.named_params().items():
            p.data = arrays[name].astype(p.data.dtype, copy=True)
        self.stats = FeatureStats(
            arrays["norm.mean"].astype(np.float64), arrays["norm.std"].astype(np.float64)
        )


def train_evaluator(corpus, seed, config=None, log_cb=None):
    """Symmetric InfoNCE over in-batch (motion, caption) pairs; frozen after."""
    if config is None:
        config = EvaluatorConfig(input_dim=corpus.feature_dim)
    if config.input_dim != corpus.feature_dim:
        raise ConfigError(
            f"evaluator input_dim {config.input_dim} != corpus feature dim {corpus.feature_dim}"
        )
    train = corpus.split_samples("train")
    stats = FeatureStats.fit([s.motion.features for s in train])
    rng = substream(seed, "init/evaluator")
    data_rng = substream(seed, "data/evaluator-batch")
    net = EvaluatorNet(config, rng, stats)
    embedder = net.embedder
    text_vecs = np.stack([embedder.embed(s.caption) for s in train])
    feats = [stats.normalize(s.motion.features).astype(np.float32) for s in train]

    optimizer = AdamW(net.named_params(), lr=config.lr, betas=(0.9, 0.99))
    initial = None
    log = []
    for step in range(config.steps):
        picks = data_rng.integers(0, len(feats), size=config.batch_size)
        crops = np.stack([crop_or_tile(feats[i], config.crop_len, data_rng) for i in picks])
        m = net.motion_enc(T.Tensor(crops.transpose(0, 2, 1)))
        t = net.text_proj(T.Tensor(text_vecs[picks]))
        m_n = T.div(m, T.add(T.sqrt(T.tsum(T.mul(m, m), axis=1, keepdims=True)), 1e-8))
        t_n = T.div(t, T.add(T.sqrt(T.tsum(T.mul(t, t), axis=1, keepdims=True)), 1e-8))
        logits = T.mul(T.matmul(m_n, T.transpose(t_n)), 1.0 / config.temperature)
        labels = np.arange(config.batch_size)
        loss_mt = T.cross_entropy(logits, labels)
        loss_tm = T.cross_entropy(T.transpose(logits), labels)
        loss = T.mul(T.add(loss_mt, loss_tm), 0.5)
        if not np.isfinite(loss.data):
            raise NumericalError("non-finite evaluator loss")
        if initial is None:
            initial = float(loss.data)
        elif float(loss.data) > 10.0 * initial + 10.0:
            raise NumericalError("evaluator training diverged")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if log_cb and (step + 1) % 50 == 0:
            log_cb({"step": step + 1, "loss": float(loss.data)})
        log.append(float(loss.data))
    return net, log


def save_evaluator(path, net, seed=0):
    meta = {
        "kind": "evaluator",
        "seed": int(seed),
        "config": {k: getattr(net.config, k) for k in net.config.__dataclass_fields__},
    }
    return save_checkpoint(path, net.state_arrays(), meta)


def load_evaluator(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "evaluator":
        raise ConfigError(f"{path} is not an evaluator checkpoint")
    net = EvaluatorNet(EvaluatorConfig(**meta["config"]))
    net.load_state_arrays(arrays)
    return net


# -- repeated-evaluation protocol -------------------------------------------------


@dataclass
class MetricProtocol:
    repetitions: int = 20
    n_candidates: int = 32
    s_dis: int = 300
    mmodality_captions: int = 10
    mmodality_reps: int = 30
    mmodality_subset: int = 10
    eval_captions: int = 0  # 0 = every test caption
    temperature: float = 1.0


@dataclass
class MetricsReport:
    generation: dict
    real_motion: dict
    protocol: dict
    collapse: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(
            {
                "generation": self.generation,
                "real_motion": self.real_motion,
                "protocol": self.protocol,
                "collapse": self.collapse,
            },
            indent=1,
            sort_keys=True,
        )

    def table(self):
        cols = ["top1", "top2", "top3", "fid", "mm_dist", "diversity", "mmodality"]
        head = f"{'':14s}" + "".join(f"{c:>12s}" for c in cols)
        lines = [head]
        for name, row in (("real_motion", self.real_motion), ("generation", self.generation)):
            cells = []
            for c in cols:
                if c in row:
                    cells.append(f"{row[c]['mean']:7.3f}±{row[c]['ci95']:.3f}")
                else:
                    cells.append("-")
            lines.append(f"{name:14s}" + "".join(f"{c:>12s}" for c in cells))
        return "\n".join(lines)


def _mean_ci(values):
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if values.size < 2:
        return {"mean": mean, "ci95": 0.0}
    ci = 1.96 * float(values.std(ddof=1)) / np.sqrt(values.size)
    return {"mean": mean, "ci95": ci}


def evaluate(vq_model, stats, gpt_model, corpus, evaluator, seed, protocol=None):
    """All five metrics with mean and 95% CI over repeated evaluations.

    Each repetition regenerates motions for the test captions with its own
    derived seed; the real-motion baseline row compares two random halves of
    the ground-truth test features.
    """
    from .gpt import decode_codes, generate_batch

    protocol = protocol or MetricProtocol()
    test = corpus.split_samples("test")
    if not test:
        raise ConfigError("corpus has an empty test split")
    if protocol.eval_captions:
        test = test[: protocol.eval_captions]
    captions = [s.caption for s in test]
    motifs = np.array([s.motif_id for s in test])

    f_real = evaluator.motion_features([s.motion.features for s in test])
    f_text = evaluator.text_features(captions)
    text_vecs = evaluator.embedder.embed_many(captions)

    per_rep = {"generation": [], "real": []}
    for rep in range(protocol.repetitions):
        rng = substream(seed, f"metrics/rep{rep}")
        seqs = generate_batch(
            gpt_model, text_vecs, mode="sample", temperature=protocol.temperature, rng=rng
        )
        decoded = []
        keep = []
        for i, s in enumerate(seqs):
            if len(s) > 0:
                decoded.append(decode_codes(vq_model, stats, s))
                keep.append(i)
        if not decoded:
            raise NumericalError("all generations were empty during evaluation")
        keep = np.array(keep)
        f_pred = evaluator.motion_features(decoded)

        gen_row = {}
        gen_row["fid"] = fid(f_real, f_pred)
        t1, t2, t3 = r_precision(
            f_pred, f_text[keep], rng, pool_text_feats=f_text,
            motion_groups=motifs[keep], pool_groups=motifs,
            n_candidates=protocol.n_candidates,
        )
        gen_row["top1"], gen_row["top2"], gen_row["top3"] = t1, t2, t3
        gen_row["mm_dist"] = mm_dist(f_pred, f_text[keep])
        gen_row["diversity"] = diversity(f_pred, protocol.s_dis, rng)

        mm_caps = captions[: protocol.mmodality_captions]

        def gen_feats(caption, gen_rng, n):
            reps_vec = np.repeat(evaluator.embedder.embed(caption)[None], n, axis=0)
            gseqs = generate_batch(
                gpt_model, reps_vec, mode="sample", temperature=protocol.temperature, rng=gen_rng
            )
            dec = [
                decode_codes(vq_model, stats, s) if len(s) else np.zeros((4, f_real.shape[1]))
                for s in gseqs
            ]
            dec = [
                d if d.shape[1] == test[0].motion.features.shape[1]
                else np.zeros_like(test[0].motion.features[:4])
                for d in dec
            ]
            return evaluator.motion_features(dec)

        gen_row["mmodality"] = mmodality(
            gen_feats, mm_caps, rng, reps=protocol.mmodality_reps, subset=protocol.mmodality_subset
        )
        per_rep["generation"].append(gen_row)

        real_row = {}
        half = len(test) // 2
        perm = rng.permutation(len(test))
        real_row["fid"] = fid(f_real[perm[:half]], f_real[perm[half : 2 * half]])
        t1, t2, t3 = r_precision(
            f_real, f_text, rng, motion_groups=motifs, pool_groups=motifs,
            n_candidates=protocol.n_candidates,
        )
        real_row["top1"], real_row["top2"], real_row["top3"] = t1, t2, t3
        real_row["mm_dist"] = mm_dist(f_real, f_text)
        real_row["diversity"] = diversity(f_real, protocol.s_dis, rng)
        per_rep["real"].append(real_row)

    gen_agg = {k: _mean_ci([row[k] for row in per_rep["generation"]]) for k in per_rep["generation"][0]}
    real_agg = {k: _mean_ci([row[k] for row in per_rep["real"]]) for k in per_rep["real"][0]}
    return MetricsReport(
        generation=gen_agg,
        real_motion=real_agg,
        protocol={k: getattr(protocol, k) for k in protocol.__dataclass_fields__},
    )
