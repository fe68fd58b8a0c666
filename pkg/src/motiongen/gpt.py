"""Text-conditioned causal transformer over code indices.

A single projected text token is the prefix; content tokens are codebook
indices and a learned END entry terminates generation. Training corrupts a
fraction tau of the ground-truth input indices to close the gap between
teacher forcing and free-running inference.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, EmptyGenerationError, NumericalError
from .nn import tensor as T
from .nn.layers import Embedding, LayerNorm, Linear, Module, fan_in_uniform
from .nn.optim import AdamW
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .seeding import substream
from .vqvae import tokenize

_TEXT_TABLE_SEED = 715517  # fixed: embeddings must be stable across runs
_TOKEN_RE = re.compile(r"[a-z0-9']+")


class TextEmbedder:
    """Deterministic stand-in for a pretrained text encoder.

    Tokens hash to rows of a fixed random projection table; the caption
    embedding is the L2-normalized mean of its token rows.
    """

    def __init__(self, dim=512, table_rows=8192):
        self.dim = dim
        rng = np.random.default_rng([_TEXT_TABLE_SEED, table_rows, dim])
        self.table = rng.standard_normal((table_rows, dim)).astype(np.float32)

    def embed(self, caption):
        tokens = _TOKEN_RE.findall(caption.lower())
        if not tokens:
            raise ValueError(f"caption has no tokens: {caption!r}")
        import zlib

        rows = [self.table[zlib.crc32(t.encode()) % self.table.shape[0]] for t in tokens]
        vec = np.mean(rows, axis=0)
        return (vec / np.linalg.norm(vec)).astype(np.float32)

    def embed_many(self, captions):
        return np.stack([self.embed(c) for c in captions])


def embed_text(caption, dim=512):
    return TextEmbedder(dim=dim).embed(caption)


@dataclass
class CodeSequence:
    """Code indices in [0, num_codes) followed by an implicit END token."""

    content: list
    num_codes: int

    def __post_init__(self):
        if any(not 0 <= i < self.num_codes for i in self.content):
            raise ValueError("code index out of range")

    @property
    def end_index(self):
        return self.num_codes

    @property
    def tokens(self):
        return list(self.content) + [self.end_index]

    def __len__(self):
        return len(self.content)


@dataclass
class GptConfig:
    num_codes: int
    layers: int = 18
    dim: int = 1024
    heads: int = 16
    max_content: int = 50
    text_dim: int = 512
    tau_mode: str = "fixed"  # "fixed" or "uniform"
    tau: float = 0.5
    batch_size: int = 128
    lr_phase1: float = 1e-4
    steps_phase1: int = 150_000
    lr_phase2: float = 5e-6
    steps_phase2: int = 150_000
    adam_betas: tuple = (0.5, 0.99)
    weight_decay: float = 0.0
    eval_interval: int = 500
    log_interval: int = 50

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.tau_mode not in ("fixed", "uniform"):
            raise ConfigError(f"tau_mode must be 'fixed' or 'uniform', got {self.tau_mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")

    @property
    def vocab(self):
        return self.num_codes + 1  # codes + END

    @property
    def context(self):
        return self.max_content + 1  # text token + codes


def desk_gpt_config(num_codes, **overrides):
    base = dict(layers=4, dim=256, heads=4, batch_size=32, steps_phase1=2000, steps_phase2=2000)
    base.update(overrides)
    return GptConfig(num_codes=num_codes, **base)


def _causal_mask(p, dtype):
    m = np.zeros((p, p), dtype=dtype)
    m[np.triu_indices(p, k=1)] = -np.inf
    return m


def causal_attention(q, k, v):
    """softmax(q k^T / sqrt(d_k) + mask) v with future positions masked out."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-2] != k.shape[-2]:
        raise T.ShapeError(f"causal_attention: query length {q.shape[-2]} != key length {k.shape[-2]}")
    dk = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = T.mul(scores, 1.0 / np.sqrt(dk))
    scores = T.add(scores, T.Tensor(_causal_mask(q.shape[-2], q.data.dtype)))
    return T.matmul(T.softmax(scores, axis=-1), v)


class Attention(Module):
    def __init__(self, dim, heads, rng):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x):
        n, p, d = x.shape
        h = self.heads
        hd = d // h
        qkv = self.qkv(x).reshape((n, p, 3, h, hd))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, N, H, P, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        out = causal_attention(q, k, v)  # (N, H, P, hd)
        out = T.transpose(out, (0, 2, 1, 3)).reshape((n, p, d))
        return self.proj(out)


class Block(Module):
    def __init__(self, dim, heads, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 4 * dim, rng)
        self.fc2 = Linear(4 * dim, dim, rng)

    def __call__(self, x):
        x = T.add(x, self.attn(self.ln1(x)))
        h = self.fc2(T.relu(self.fc1(self.ln2(x))))
        return T.add(x, h)


class GptModel:
    def __init__(self, config, init_rng=None):
        self.config = config
        rng = init_rng if init_rng is not None else np.random.default_rng(0)
        self.token_emb = Embedding(config.vocab, config.dim, rng)
        self.pos_emb = T.Tensor(
            fan_in_uniform(rng, (config.context, config.dim), config.dim), requires_grad=True
        )
        self.text_proj = Linear(config.text_dim, config.dim, rng)
        self.blocks = [Block(config.dim, config.heads, rng) for _ in range(config.layers)]
        self.ln_f = LayerNorm(config.dim)
        self.head = Linear(config.dim, config.vocab, rng)

    def forward(self, text_vecs, codes_in):
        """(N, text_dim) float, (N, L) int -> (N, L+1, vocab) logits."""
        n, l = codes_in.shape if codes_in.size else (text_vecs.shape[0], 0)
        p = l + 1
        if p > self.config.context:
            raise T.ShapeError(
                f"sequence of {l} codes exceeds context {self.config.context} (text token + {self.config.max_content})"
            )
        text_tok = self.text_proj(T.Tensor(text_vecs)).reshape((n, 1, self.config.dim))
        if l:
            x = T.concat([text_tok, self.token_emb(codes_in)], axis=1)
        else:
            x = text_tok
        x = T.add(x, self.pos_emb[:p])
        for b in self.blocks:
            x = b(x)
        x = self.ln_f(x)
        return self.head(x)

    def named_params(self):
        out = {"pos_emb": self.pos_emb}
        out.update(self.token_emb.named_params("token_emb"))
        out.update(self.text_proj.named_params("text_proj"))
        for i, b in enumerate(self.blocks):
            out.update(b.named_params(f"blocks.{i}"))
        out.update(self.ln_f.named_params("ln_f"))
        out.update(self.head.named_params("head"))
        return out

    def state_arrays(self):
        return {n: p.data for n, p in self.named_params().items()}

    def load_state_arrays(self, arrays):
        for name, p in self.named_params().items():
            p.data = arrays[name].astype(p.data.dtype, copy=True)


# -- corruption ----------------------------------------------------------------


def corrupt(seq, tau, rng, num_codes=None):
    """Replace round(tau * n) content positions with uniform random indices.

    Positions are drawn without replacement; the replacement value may equal
    the original. END (and anything beyond the content) is never touched.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if isinstance(seq, CodeSequence):
        content, k = list(seq.content), seq.num_codes
    else:
        content, k = list(seq), num_codes
        if k is None:
            raise ValueError("num_codes required when passing a bare index list")
    n = len(content)
    count = int(np.floor(tau * n + 0.5))
    if count:
        pos = rng.choice(n, size=count, replace=False)
        vals = rng.integers(0, k, size=count)
        for p, v in zip(pos, vals):
            content[int(p)] = int(v)
    return CodeSequence(content, k)


# -- training ------------------------------------------------------------------


def _draw_tau(config, rng):
    return float(rng.uniform()) if config.tau_mode == "uniform" else config.tau


def assemble_batch(sequences, text_vecs, config, rng):
    """Corrupted inputs, clean targets and a validity mask, right-padded."""
    n = len(sequences)
    lmax = max(len(s) for s in sequences)
    p = lmax + 1
    inputs = np.full((n, lmax), fill_value=config.num_codes, dtype=np.int64)  # pad with END id
    targets = np.zeros((n, p), dtype=np.int64)
    valid = np.zeros((n, p), dtype=bool)
    for i, s in enumerate(sequences):
        tau = _draw_tau(config, rng)
        corrupted = corrupt(s, tau, rng)
        li = len(s)
        inputs[i, :li] = corrupted.content
        targets[i, : li + 1] = s.tokens  # clean indices even when inputs are corrupted
        valid[i, : li + 1] = True
    return np.asarray(text_vecs), inputs, targets, valid


def gpt_train_step(model, batch, optimizer):
    text_vecs, inputs, targets, valid = batch
    logits = model.forward(text_vecs, inputs)
    n, p, v = logits.shape
    loss = T.cross_entropy(
        logits.reshape((n * p, v)), targets.reshape(-1), ignore_mask=~valid.reshape(-1)
    )
    if not np.isfinite(loss.data):
        raise NumericalError(f"non-finite transformer loss at step {optimizer.step_count + 1}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.data)


@dataclass
class GptTrainResult:
    arrays: dict
    meta: dict
    log: list
    best_metric: float


def prepare_sequences(corpus_split, vq_model, stats, embedder, max_content):
    """Tokenize motions and embed captions once before training."""
    seqs, texts = [], []
    k = vq_model.config.num_codes
    for s in corpus_split:
        idx = tokenize(vq_model, stats, s.motion.features)[:max_content]
        seqs.append(CodeSequence(idx, k))
        texts.append(embedder.embed(s.caption))
    return seqs, np.stack(texts)


def train_gpt(config, corpus, vq_model, stats, seed, evaluator=None, log_cb=None):
    """Two-phase AdamW training of the code transformer on tokenized motions."""
    if config.num_codes != vq_model.config.num_codes:
        raise ConfigError(
            f"transformer expects {config.num_codes} codes but tokenizer has {vq_model.config.num_codes}"
        )
    embedder = TextEmbedder(dim=config.text_dim)
    train = corpus.split_samples("train")
    if not train:
        raise ConfigError("corpus has an empty train split")
    seqs, texts = prepare_sequences(train, vq_model, stats, embedder, config.max_content)
    val = corpus.split_samples("val") or corpus.split_samples("test")

    init_rng = substream(seed, "init/gpt")
    batch_rng = substream(seed, "data/gpt-batch")
    corrupt_rng = substream(seed, "corruption")
    sample_rng_seed = substream(seed, "sampling/val").integers(0, 2**31 - 1)

    model = GptModel(config, init_rng)
    optimizer = AdamW(
        model.named_params(),
        lr=config.lr_phase1,
        betas=config.adam_betas,
        weight_decay=config.weight_decay,
    )

    total_steps = config.steps_phase1 + config.steps_phase2
    log = []
    best_metric = np.inf
    best_arrays = None

    for step in range(total_steps):
        optimizer.lr = config.lr_phase1 if step < config.steps_phase1 else config.lr_phase2
        picks = batch_rng.integers(0, len(seqs), size=config.batch_size)
        batch = assemble_batch(
            [seqs[i] for i in picks], texts[picks], config, corrupt_rng
        )
        loss = gpt_train_step(model, batch, optimizer)

        if (step + 1) % config.log_interval == 0 or step == total_steps - 1:
            row = {"step": step + 1, "lr": optimizer.lr, "loss": loss}
            log.append(row)
            if log_cb:
                log_cb(row)

        if (step + 1) % config.eval_interval == 0 or step == total_steps - 1:
            metric = _val_metric(model, config, val, embedder, vq_model, stats, evaluator,
                                 int(sample_rng_seed))
            if metric <= best_metric:
                best_metric = metric
                best_arrays = {k: v.copy() for k, v in model.state_arrays().items()}

    arrays = best_arrays if best_arrays is not None else model.state_arrays()
    meta = {
        "kind": "gpt",
        "seed": int(seed),
        "config": _config_meta(config),
        "best_metric": float(best_metric) if np.isfinite(best_metric) else None,
    }
    return GptTrainResult(arrays=dict(arrays), meta=meta, log=log, best_metric=best_metric)


def _val_metric(model, config, val_samples, embedder, vq_model, stats, evaluator, seed):
    """Generation FID on the validation captions when an evaluator is
    available, else teacher-forced validation loss."""
    if not val_samples:
        return np.inf
    if evaluator is None:
        seqs, texts = prepare_sequences(val_samples, vq_model, stats, embedder, config.max_content)
        batch = assemble_batch(seqs, texts, _tau_zero(config), np.random.default_rng(0))
        with T.no_grad():
            logits = model.forward(batch[0], batch[1])
            n, p, v = logits.shape
            loss = T.cross_entropy(
                logits.reshape((n * p, v)), batch[2].reshape(-1), ignore_mask=~batch[3].reshape(-1)
            )
        return float(loss.data)
    from .metrics import fid

    rng = np.random.default_rng(seed)
    texts = embedder.embed_many([s.caption for s in val_samples])
    seqs = generate_batch(model, texts, mode="sample", temperature=1.0, rng=rng)
    feats_pred = evaluator.motion_features(
        [decode_codes(vq_model, stats, s) for s in seqs]
    )
    feats_real = evaluator.motion_features([s.motion.features for s in val_samples])
    return float(fid(feats_real, feats_pred))


def _tau_zero(config):
    return replace(config, tau_mode="fixed", tau=0.0)


def _config_meta(config):
    d = {k: getattr(config, k) for k in config.__dataclass_fields__}
    d["adam_betas"] = list(d["adam_betas"])
    return d


def config_from_meta(meta):
    d = dict(meta["config"])
    d["adam_betas"] = tuple(d["adam_betas"])
    return GptConfig(**d)


def save_gpt(path, result):
    return save_checkpoint(path, result.arrays, result.meta)


def load_gpt(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "gpt":
        raise ConfigError(f"{path} is not a transformer checkpoint")
    config = config_from_meta(meta)
    model = GptModel(config)
    model.load_state_arrays(arrays)
    return model, meta


# -- generation ----------------------------------------------------------------


def generate_batch(model, text_vecs, mode="greedy", temperature=1.0, rng=None, max_content=None):
    """Autoregressive decoding for a batch of caption embeddings.

    Stops each row at END or at the content cap (END then forced). Greedy
    mode needs no rng and is deterministic.
    """
    cfg = model.config
    cap = cfg.max_content if max_content is None else min(max_content, cfg.max_content)
    if mode == "sample" and rng is None:
        raise ValueError("sample mode requires an rng")
    n = text_vecs.shape[0]
    end = cfg.num_codes
    rows = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    codes_in = np.zeros((n, 0), dtype=np.int64)
    with T.no_grad():
        for _ in range(cap):
            logits = model.forward(text_vecs, codes_in).data[:, -1, :]
            if mode == "greedy":
                nxt = logits.argmax(axis=1)
            elif mode == "sample":
                scaled = logits / max(temperature, 1e-8)
                scaled -= scaled.max(axis=1, keepdims=True)
                probs = np.exp(scaled)
                probs /= probs.sum(axis=1, keepdims=True)
                nxt = np.array([rng.choice(cfg.vocab, p=probs[i]) for i in range(n)])
            else:
                raise ValueError(f"unknown mode {mode!r}")
            nxt = np.where(done, end, nxt)
            newly_done = nxt == end
            for i in range(n):
                if not done[i] and not newly_done[i]:
                    rows[i].append(int(nxt[i]))
            done |= newly_done
            if done.all():
                break
            # feed END at finished rows; they are masked from their own future anyway
            codes_in = np.concatenate([codes_in, nxt[:, None]], axis=1)
    return [CodeSequence(r, cfg.num_codes) for r in rows]


def generate(model, caption, mode="greedy", temperature=1.0, rng=None, embedder=None):
    embedder = embedder or TextEmbedder(dim=model.config.text_dim)
    vec = embedder.embed(caption)[None]
    return generate_batch(model, vec, mode=mode, temperature=temperature, rng=rng)[0]


def decode_codes(vq_model, stats, seq):
    """Map a code sequence to a denormalized (4L, D) feature array."""
    if len(seq) == 0:
        raise EmptyGenerationError("empty motion: model emitted END immediately")
    codes = vq_model.codebook.codes.data[np.asarray(seq.content)]
    with T.no_grad():
        zq = T.Tensor(codes.T[None])
        out = vq_model.decode(zq)
    return stats.denormalize(out.data[0].T)


def text_to_motion(vq_model, stats, gpt_model, caption, mode="greedy", temperature=1.0,
                   rng=None, fps=20.0, layout=None):
    """Full inference path: caption -> code sequence -> decoded motion."""
    from .motion import MotionSequence, PoseFeatureLayout

    if gpt_model.config.num_codes != vq_model.config.num_codes:
        raise ConfigError(
            f"codebook size mismatch: transformer {gpt_model.config.num_codes} vs "
            f"tokenizer {vq_model.config.num_codes}"
        )
    seq = generate(gpt_model, caption, mode=mode, temperature=temperature, rng=rng)
    feats = decode_codes(vq_model, stats, seq)
    if layout is None:
        joints = (feats.shape[1] + 1) // 12
        layout = PoseFeatureLayout(joints)
    return MotionSequence(feats.astype(np.float32), fps=fps, layout=layout), seq
