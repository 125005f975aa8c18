"""Decoder-only token language model over a continuous conditioning prefix.

Four embedding tables (one per codebook layer) are summed per step, a stack of
pre-norm blocks (RMS norm, rotary attention, gated feed-forward) runs causally
over ``[prefix ‖ history]``, and four heads predict the next delayed row.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .codec import pseudo_ssl
from .errors import GridError, TrainingFault
from .seqgrammar import (
    N_LAYERS,
    EmbeddingBlock,
    Mode,
    SpecialToken,
    TokenGrid,
    Vocabulary,
    build_conditioning,
    remove_delay,
)

torch.set_default_dtype(torch.float64)

PRESETS = {
    "toy": (2, 64, 4),
    "S": (8, 768, 8),
    "base": (16, 1024, 16),
    "L": (44, 1024, 32),
}
TEXT_TABLE_SEED = 0x7E47


@dataclass(frozen=True)
class LMConfig:
    depth: int = 2
    embed: int = 64
    heads: int = 4
    codebook_size: int = 64
    max_seq_len: int = 1024
    preset: str = "toy"
    ssl_dim: int = 64
    text_dim: int = 64
    text_rows: int = 4096
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.embed % self.heads:
            raise ValueError(f"embed {self.embed} is not divisible by heads {self.heads}")
        if (self.embed // self.heads) % 2:
            raise ValueError("rotary encoding needs an even head dimension")

    @property
    def vocab(self):
        return Vocabulary(self.codebook_size)

    @property
    def head_vocab(self):
        return self.vocab.head_size

    @property
    def ffn_hidden(self):
        return 8 * ((8 * self.embed // 3 + 7) // 8)

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown LM preset {name!r}; choose from {sorted(PRESETS)}")
        depth, embed, heads = PRESETS[name]
        return cls(depth=depth, embed=embed, heads=heads, preset=name, **overrides)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class RMSNorm(nn.Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rotate(x, positions, base):
    """Rotary encoding of (B, H, L, D) queries/keys at integer (B, L) positions."""
    half = x.shape[-1] // 2
    freqs = base ** (-torch.arange(half, dtype=x.dtype) / half)
    angles = positions[:, None, :, None].to(x.dtype) * freqs
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.heads = cfg.heads
        self.rope_base = cfg.rope_base
        self.qkv = nn.Linear(cfg.embed, 3 * cfg.embed, bias=False)
        self.out = nn.Linear(cfg.embed, cfg.embed, bias=False)

    def forward(self, x, positions, allowed):
        b, n, e = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, e // self.heads).permute(2, 0, 3, 1, 4)
        q, k = rotate(q, positions, self.rope_base), rotate(k, positions, self.rope_base)
        scores = q @ k.transpose(-1, -2) / math.sqrt(e // self.heads)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        y = torch.softmax(scores, dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(b, n, e))


class FeedForward(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.gate = nn.Linear(cfg.embed, cfg.ffn_hidden, bias=False)
        self.up = nn.Linear(cfg.embed, cfg.ffn_hidden, bias=False)
        self.down = nn.Linear(cfg.ffn_hidden, cfg.embed, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.embed)
        self.attn = Attention(cfg)
        self.ffn_norm = RMSNorm(cfg.embed)
        self.ffn = FeedForward(cfg)

    def forward(self, x, positions, allowed):
        x = x + self.attn(self.attn_norm(x), positions, allowed)
        return x + self.ffn(self.ffn_norm(x))


class TokenLM(nn.Module):
    """All LM parameters; ``forward`` maps (prefix, delayed history) to logits."""

    def __init__(self, cfg):
        super().__init__()
        self.config = cfg
        self.token_embeddings = nn.ModuleList(nn.Embedding(cfg.head_vocab, cfg.embed) for _ in range(N_LAYERS))
        self.special_embedding = nn.Embedding(cfg.vocab.n_special, cfg.embed)
        self.audio_adapter = nn.Linear(cfg.ssl_dim, cfg.embed)
        self.text_adapter = nn.Linear(cfg.text_dim, cfg.embed)
        table = np.random.default_rng(TEXT_TABLE_SEED).standard_normal((cfg.text_rows, cfg.text_dim))
        self.register_buffer("text_table", torch.from_numpy(table))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = RMSNorm(cfg.embed)
        self.heads = nn.ModuleList(nn.Linear(cfg.embed, cfg.head_vocab, bias=False) for _ in range(N_LAYERS))
        for emb in self.token_embeddings:
            nn.init.normal_(emb.weight, std=0.02)
        nn.init.normal_(self.special_embedding.weight, std=0.02)

    def embed_rows(self, rows):
        """Sum of the four per-layer embeddings, rows (..., 4) -> (..., embed)."""
        return sum(table(rows[..., i]) for i, table in enumerate(self.token_embeddings))

    def forward(self, prefix, history, prefix_mask=None):
        """Logits (B, H + 1, 4, V) at the last prefix position and every history row."""
        b, p, _ = prefix.shape
        h = history.shape[1]
        if p + h > self.config.max_seq_len:
            raise ValueError(f"sequence of {p + h} positions exceeds max_seq_len {self.config.max_seq_len}")
        if p == 0:
            raise ValueError("empty conditioning prefix")
        x = torch.cat([prefix, self.embed_rows(history)], dim=1)
        if prefix_mask is None:
            prefix_mask = torch.ones(b, p, dtype=torch.bool)
        valid = torch.cat([prefix_mask, torch.ones(b, h, dtype=torch.bool)], dim=1)
        positions = (valid.long().cumsum(1) - 1).clamp_min(0)
        n = p + h
        causal = torch.ones(n, n, dtype=torch.bool).tril()
        allowed = (causal & valid[:, None, :]) | torch.eye(n, dtype=torch.bool)
        for block in self.blocks:
            x = block(x, positions, allowed)
        x = self.norm(x[:, p - 1:])
        return torch.stack([head(x) for head in self.heads], dim=2)


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------

def caption_ids(caption, rows=4096):
    """Whitespace tokens hashed (64-bit BLAKE2b) into ``rows`` buckets."""
    words = caption.lower().split()
    return np.array([int.from_bytes(hashlib.blake2b(w.encode(), digest_size=8).digest(), "little") % rows
                     for w in words], dtype=np.int64)


@dataclass
class ConditionFeatures:
    """Encoder-side features for one request, ready for the adapters."""

    mode: Mode
    audio: np.ndarray
    reference: np.ndarray = None
    caption: np.ndarray = None

    def lengths(self):
        return {"audio": len(self.audio),
                "reference": None if self.reference is None else len(self.reference),
                "caption": None if self.caption is None else len(self.caption)}


def extract_conditions(mode, audio, reference=None, caption=None, ssl_dim=64, text_rows=4096):
    """Pseudo-SSL features for audio blocks and hashed ids for the caption.

    Validates the mode's template first, so a missing condition fails before any
    feature extraction.
    """
    mode = Mode.parse(mode)
    lengths = {"audio": 1, "reference": None if reference is None else 1,
               "caption": None if caption is None else 1}
    build_conditioning(mode, lengths)
    feats = ConditionFeatures(mode, pseudo_ssl(audio, ssl_dim))
    if reference is not None:
        feats.reference = pseudo_ssl(reference, ssl_dim)
    if caption is not None:
        feats.caption = caption_ids(caption, text_rows)
    build_conditioning(mode, feats.lengths())
    return feats


def conditioning_of(model, feats):
    return build_conditioning(feats.mode, feats.lengths(), model.config.vocab)


def embed_conditions(model, feats):
    """Assemble the (P, embed) prefix in template order."""
    vocab = model.config.vocab
    seq = conditioning_of(model, feats)
    parts = []
    for element in seq.elements:
        if isinstance(element, SpecialToken):
            parts.append(model.special_embedding(torch.tensor([vocab.special_row(element.id)])))
        elif element.source == "caption":
            parts.append(model.text_adapter(model.text_table[torch.from_numpy(feats.caption)]))
        else:
            block = feats.audio if element.source == "audio" else feats.reference
            parts.append(model.audio_adapter(torch.from_numpy(block)))
    return torch.cat(parts, dim=0)


def encode_conditions(model, mode, audio, reference=None, caption=None):
    cfg = model.config
    feats = extract_conditions(mode, audio, reference, caption, cfg.ssl_dim, cfg.text_rows)
    return embed_conditions(model, feats)


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------

@dataclass
class Example:
    features: ConditionFeatures
    labels: np.ndarray  # (L, 4) targets from seqgrammar.target_sequence
    mask: np.ndarray


def collate(model, batch):
    """Left-pad prefixes, right-pad histories; returns tensors for one step."""
    vocab = model.config.vocab
    prefixes = [embed_conditions(model, ex.features) for ex in batch]
    p_max = max(p.shape[0] for p in prefixes)
    l_max = max(ex.labels.shape[0] for ex in batch)
    e = model.config.embed
    prefix = torch.stack([torch.cat([p.new_zeros(p_max - p.shape[0], e), p]) for p in prefixes])
    prefix_mask = torch.tensor([[False] * (p_max - p.shape[0]) + [True] * p.shape[0] for p in prefixes])
    labels = np.full((len(batch), l_max, N_LAYERS), vocab.pad, dtype=np.int64)
    mask = np.zeros((len(batch), l_max, N_LAYERS), dtype=bool)
    for i, ex in enumerate(batch):
        labels[i, :ex.labels.shape[0]] = ex.labels
        mask[i, :ex.mask.shape[0]] = ex.mask
    labels = torch.from_numpy(labels)
    return prefix, prefix_mask, labels[:, :-1], labels, torch.from_numpy(mask)


def nll_loss(logits, targets, mask):
    """Masked mean negative log-likelihood over all positions and layers.

    Returns (loss, per-layer NLL sums, per-layer unmasked counts).
    """
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    vocab = logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target id outside [0, {vocab})")
    logp = torch.log_softmax(logits, dim=-1)
    picked = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    picked = torch.where(mask, picked, torch.zeros_like(picked))
    layer_dims = tuple(range(picked.dim() - 1))
    per_layer = picked.sum(dim=layer_dims)
    counts = mask.sum(dim=layer_dims)
    total = mask.sum()
    if total == 0:
        return picked.sum() * 0.0, per_layer, counts
    return per_layer.sum() / total, per_layer, counts


def warmup_decay_lr(step, peak=1e-3, warmup=4000, steps_per_epoch=1000, decay=0.98):
    """Linear warm-up to ``peak`` at ``warmup``, then ×``decay`` per epoch."""
    if step < warmup:
        return peak * step / warmup
    return peak * decay ** ((step - warmup) // steps_per_epoch)


@dataclass
class LMLossReport:
    loss: float
    accuracy: float
    lr: float
    per_layer: list = field(default_factory=list)
    mode: str = None


def _check_gradients(model, step):
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise TrainingFault(f"non-finite gradient in {name} at step {step}", step, name)


def train_step(model, optimizer, batch, lr, step=0):
    """One AdamW update on a batch of examples; returns the pre-update loss."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    prefix, prefix_mask, history, targets, mask = collate(model, batch)
    logits = model(prefix, history, prefix_mask)
    loss, per_layer, counts = nll_loss(logits, targets, mask)
    if not torch.isfinite(loss):
        raise TrainingFault(f"non-finite loss at step {step}", step, "loss")
    optimizer.zero_grad()
    loss.backward()
    _check_gradients(model, step)
    optimizer.step()
    with torch.no_grad():
        correct = ((logits.argmax(-1) == targets) & mask).sum().item()
    return LMLossReport(loss.item(), correct / max(1, mask.sum().item()), lr,
                        (per_layer / counts.clamp_min(1)).tolist())


def token_accuracy(model, batch):
    with torch.no_grad():
        prefix, prefix_mask, history, targets, mask = collate(model, batch)
        logits = model(prefix, history, prefix_mask)
        return (((logits.argmax(-1) == targets) & mask).sum() / mask.sum()).item()


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingSpec:
    temperature: float = 0.0
    top_k: int = None
    seed: int = 0

    @property
    def greedy(self):
        return self.temperature <= 0.0


@dataclass
class Generation:
    grid: TokenGrid  # interleaved, undelayed
    delayed: TokenGrid
    truncated: bool


def _choose(logits, allowed, spec, rng):
    scores = logits.copy()
    scores[~allowed] = -np.inf
    if spec.greedy:
        return int(np.argmax(scores))
    scores = scores / spec.temperature
    if spec.top_k:
        kth = np.sort(scores)[-min(spec.top_k, int(allowed.sum()))]
        scores[scores < kth] = -np.inf
    probs = np.exp(scores - scores.max())
    probs /= probs.sum()
    return int(rng.choice(len(probs), p=probs))


def generate(model, prefix, max_steps=1000, sampling=SamplingSpec(), rate=50):
    """Autoregressive decoding in delayed coordinates.

    Layer i is forced to PAD before step i. Decoding runs until layer 0 emits
    END at step T (or ``max_steps`` is hit, which forces END and flags
    truncation); three flush steps then finish layers 1-3, each ending with its
    own END. The returned grid is the undelayed interleaved (T, 4) grid.
    """
    vocab = model.config.vocab
    codec = np.zeros(vocab.head_size, dtype=bool)
    codec[:vocab.codebook_size] = True
    codec_or_end = codec.copy()
    codec_or_end[vocab.end] = True
    rng = np.random.default_rng(sampling.seed)
    rows = []
    end_step = None
    truncated = False
    step = 0
    with torch.no_grad():
        while end_step is None or step <= end_step + N_LAYERS - 1:
            history = torch.tensor(np.array(rows, dtype=np.int64).reshape(1, -1, N_LAYERS))
            logits = model(prefix[None], history)[0, -1].numpy()
            row = []
            for layer in range(N_LAYERS):
                if step < layer:
                    row.append(vocab.pad)
                    continue
                if end_step is None:
                    if layer == 0 and step >= max_steps:
                        truncated = True
                        row.append(vocab.end)
                        continue
                    allowed = codec_or_end if layer == 0 else codec
                else:
                    t = step - layer
                    if t > end_step:
                        row.append(vocab.pad)
                        continue
                    if t == end_step:
                        row.append(vocab.end)
                        continue
                    allowed = codec
                row.append(_choose(logits[layer], allowed, sampling, rng))
            if end_step is None and row[0] == vocab.end:
                end_step = step
            rows.append(row)
            step += 1
    labels = np.array(rows, dtype=np.int64)
    delayed_rows = np.where(labels == vocab.end, vocab.pad, labels)[:-1]
    delayed = TokenGrid(delayed_rows, rate, "delayed")
    if end_step == 0:
        grid = TokenGrid(np.empty((0, N_LAYERS), dtype=np.int64), rate, "interleaved")
    else:
        grid = remove_delay(delayed, vocab.pad)
    return Generation(grid, delayed, truncated)


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class LMTrainer:
    """Optimizer plus the schedule and sampling state needed for exact resumption."""

    def __init__(self, model, peak_lr=1e-3, warmup=4000, steps_per_epoch=1000, lr_decay=0.98,
                 weight_decay=0.01, batch_size=16, seed=0):
        self.model = model
        self.peak_lr = peak_lr
        self.warmup = warmup
        self.steps_per_epoch = steps_per_epoch
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=peak_lr, weight_decay=weight_decay)
        self.rng = np.random.default_rng(seed)
        self.step = 0

    def lr(self, step=None):
        step = self.step if step is None else step
        return warmup_decay_lr(step, self.peak_lr, self.warmup, self.steps_per_epoch, self.lr_decay)

    def train_step(self, batch):
        # lr for the update that takes the model from step -> step + 1
        report = train_step(self.model, self.optimizer, batch, self.lr(self.step + 1), self.step)
        self.step += 1
        return report

    def sample_batch(self, examples):
        size = min(self.batch_size, len(examples))
        idx = self.rng.choice(len(examples), size, replace=False)
        return [examples[i] for i in sorted(idx)]


class UniTokLM(BaseEstimator):
    """Estimator front-end: ``fit`` trains on examples, ``predict`` generates grids."""

    def __init__(self, preset="toy", codebook_size=64, ssl_dim=64, max_seq_len=1024, steps=2000,
                 batch_size=16, peak_lr=3e-3, warmup=100, steps_per_epoch=1000, lr_decay=0.98,
                 weight_decay=0.0, random_state=0):
        self.preset = preset
        self.codebook_size = codebook_size
        self.ssl_dim = ssl_dim
        self.max_seq_len = max_seq_len
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup = warmup
        self.steps_per_epoch = steps_per_epoch
        self.lr_decay = lr_decay
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _init_model(self):
        cfg = LMConfig.from_preset(self.preset, codebook_size=self.codebook_size, ssl_dim=self.ssl_dim,
                                   max_seq_len=self.max_seq_len)
        torch.manual_seed(self.random_state)
        self.model_ = TokenLM(cfg)
        self.trainer_ = LMTrainer(self.model_, self.peak_lr, self.warmup, self.steps_per_epoch, self.lr_decay,
                                  self.weight_decay, self.batch_size, self.random_state)
        self.history_ = []

    def fit(self, X, y=None, until_accuracy=None, callback=None):
        """Train on a list of :class:`Example`; optionally stop once the whole
        set reaches ``until_accuracy`` token accuracy (checked every 50 steps)."""
        if not X:
            raise ValueError("empty training set")
        self._init_model()
        for _ in range(self.steps):
            report = self.trainer_.train_step(self.trainer_.sample_batch(X))
            self.history_.append(report)
            if callback is not None:
                callback(self.trainer_.step, report)
            if until_accuracy is not None and self.trainer_.step % 50 == 0:
                if token_accuracy(self.model_, X) > until_accuracy:
                    break
        return self

    def predict(self, X, max_steps=1000, sampling=SamplingSpec()):
        """Generate one interleaved grid per :class:`ConditionFeatures`."""
        check_is_fitted(self, "model_")
        single = isinstance(X, ConditionFeatures)
        out = [self.generate(f, max_steps, sampling).grid for f in ([X] if single else X)]
        return out[0] if single else out

    def generate(self, features, max_steps=1000, sampling=SamplingSpec()):
        check_is_fitted(self, "model_")
        with torch.no_grad():
            prefix = embed_conditions(self.model_, features)
        return generate(self.model_, prefix, max_steps, sampling)

    def score(self, X, y=None):
        return token_accuracy(self.model_, X)

    @classmethod
    def from_model(cls, model, **kwargs):
        cfg = model.config
        est = cls(preset=cfg.preset, codebook_size=cfg.codebook_size, ssl_dim=cfg.ssl_dim,
                  max_seq_len=cfg.max_seq_len, **kwargs)
        est.model_ = model
        return est


def make_example(features, delayed, vocab):
    from .seqgrammar import target_sequence

    target = target_sequence(delayed, vocab)
    return Example(features, target.labels, target.mask)


def check_generated(grid, vocab):
    if np.any(~vocab.is_codec(grid.rows)):
        raise GridError("generated grid contains non-codec ids")
    return grid
