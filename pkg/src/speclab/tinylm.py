"""Tiny fixed-window neural language models in float64 numpy.

The model embeds the last ``context_len`` tokens (left-padding short contexts
with a reserved pad id), concatenates the embeddings, applies

    hidden = tanh(x @ w1 + b1)
    logits = hidden @ w2 + b2

and normalizes with a softmax over the vocabulary.  The backward pass is
written out by hand, which keeps gradients with respect to one-hot token
inputs exact and framework-free.  The same architecture serves as both the
large verifier model and, at reduced width, a drafter distilled from it.

Everything here is pure float64 numpy: ``forward``, ``log_prob``,
``input_gradient`` and ``perplexity`` are side-effect free and safe for
concurrent shared-read use of a params object.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError

# Probabilities are clamped at this floor before any log: surprisal
# maximization deliberately drives probabilities toward zero, and an
# unbounded log would destabilize both losses and gradients.
PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)

CHECKPOINT_MAGIC = b"TINYLM\x00\x00"
CHECKPOINT_VERSION = 1

EpochCallback = Callable[[int, float], None]


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Ordered set of tokens; token ids are 0..size-1 in symbol order."""

    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.symbols) < 2:
            raise InputError("vocabulary needs at least 2 symbols")
        if len(set(self.symbols)) != len(self.symbols):
            raise InputError("vocabulary symbols must be distinct")
        if any(not isinstance(s, str) or not s for s in self.symbols):
            raise InputError("vocabulary symbols must be non-empty strings")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        """Character vocabulary: distinct characters of `text` in sorted order."""
        return cls(tuple(sorted(set(text))))

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self._index[ch] for ch in text)
        except KeyError as exc:
            raise InputError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        for i in ids:
            if not 0 <= int(i) < self.size:
                raise InputError(f"token id {i} out of range for V={self.size}")
        return "".join(self.symbols[int(i)] for i in ids)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dimensions (vocabulary size comes from the data)."""

    context_len: int = 8
    embed_dim: int = 16
    hidden_dim: int = 128

    def __post_init__(self) -> None:
        if self.context_len < 1 or self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("model dimensions must be positive")


@dataclass(frozen=True)
class ModelParams:
    """Weights of one fixed-window model.

    ``embedding`` has ``vocab_size + 1`` rows; the extra final row is the
    reserved pad embedding used to left-fill contexts shorter than
    ``context_len``.  The pad id is never produced by decoding.
    """

    vocab_size: int
    context_len: int
    embedding: np.ndarray  # (vocab_size + 1, embed_dim)
    w1: np.ndarray  # (context_len * embed_dim, hidden_dim)
    b1: np.ndarray  # (hidden_dim,)
    w2: np.ndarray  # (hidden_dim, vocab_size)
    b2: np.ndarray  # (vocab_size,)

    def __post_init__(self) -> None:
        v, c = self.vocab_size, self.context_len
        if v < 2 or c < 1:
            raise InputError("vocab_size must be >= 2 and context_len >= 1")
        if self.embedding.ndim != 2 or self.embedding.shape[0] != v + 1:
            raise InputError("embedding must have vocab_size + 1 rows")
        d = self.embedding.shape[1]
        h = self.w1.shape[1] if self.w1.ndim == 2 else -1
        if self.w1.shape != (c * d, h) or h < 1:
            raise InputError("w1 shape inconsistent with context_len * embed_dim")
        if self.b1.shape != (h,) or self.w2.shape != (h, v) or self.b2.shape != (v,):
            raise InputError("layer shapes mutually inconsistent")
        for name in ("embedding", "w1", "b1", "w2", "b2"):
            arr = getattr(self, name)
            if arr.dtype != np.float64:
                raise InputError(f"{name} must be float64")
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains non-finite entries")

    @property
    def pad_id(self) -> int:
        return self.vocab_size

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]


def random_params(vocab_size: int, model: ModelConfig, seed) -> ModelParams:
    """Seeded random initialization (small normal weights, zero biases)."""
    rng = np.random.default_rng(seed)
    scale = 0.1
    d, h, c = model.embed_dim, model.hidden_dim, model.context_len
    return ModelParams(
        vocab_size=vocab_size,
        context_len=c,
        embedding=rng.normal(0.0, scale, size=(vocab_size + 1, d)),
        w1=rng.normal(0.0, scale, size=(c * d, h)),
        b1=np.zeros(h),
        w2=rng.normal(0.0, scale, size=(h, vocab_size)),
        b2=np.zeros(vocab_size),
    )


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def context_window(params: ModelParams, context: Sequence[int]) -> np.ndarray:
    """Last ``context_len`` token ids of `context`, left-padded with the pad id."""
    ids = np.asarray(context, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("context must be a non-empty 1-D token sequence")
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise InputError("context contains token ids outside [0, vocab_size)")
    c = params.context_len
    window = np.full(c, params.pad_id, dtype=np.int64)
    take = min(c, ids.size)
    window[c - take :] = ids[-take:]
    return window


def _affine_forward(params: ModelParams, windows: np.ndarray):
    """Forward pass for a (B, context_len) batch of window ids.

    Returns (logits, x, hidden) where x is the concatenated embedding input
    and hidden the post-tanh activations; both are reused by backward passes.
    """
    emb = params.embedding[windows]
    x = emb.reshape(windows.shape[0], -1)
    hidden = np.tanh(x @ params.w1 + params.b1)
    logits = hidden @ params.w2 + params.b2
    return logits, x, hidden


def forward(params: ModelParams, context: Sequence[int]) -> np.ndarray:
    """Next-token distribution given `context` (length-V probability vector)."""
    window = context_window(params, context)
    logits, _, _ = _affine_forward(params, window[None, :])
    return softmax(logits[0])


def forward_batch(params: ModelParams, contexts: Sequence[Sequence[int]]) -> np.ndarray:
    """Next-token distributions for several contexts at once, shape (B, V)."""
    windows = np.stack([context_window(params, c) for c in contexts])
    logits, _, _ = _affine_forward(params, windows)
    return softmax(logits, axis=1)


def log_forward_batch(params: ModelParams, contexts: Sequence[Sequence[int]]) -> np.ndarray:
    """Log of `forward_batch`, computed in log-space (not floored)."""
    windows = np.stack([context_window(params, c) for c in contexts])
    logits, _, _ = _affine_forward(params, windows)
    return log_softmax(logits, axis=1)


def log_prob(params: ModelParams, context: Sequence[int], token: int) -> float:
    """log prob of `token` after `context`, floored at log(PROB_FLOOR)."""
    token = int(token)
    if not 0 <= token < params.vocab_size:
        raise InputError(f"token id {token} out of range")
    window = context_window(params, context)
    logits, _, _ = _affine_forward(params, window[None, :])
    return float(max(log_softmax(logits[0])[token], LOG_FLOOR))


def perplexity(params: ModelParams, text: Sequence[int]) -> float:
    """exp(mean teacher-forced surprisal) of `text` under the model."""
    ids = np.asarray(text, dtype=np.int64)
    if ids.size < 2:
        raise InputError("perplexity needs a sequence of length >= 2")
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise InputError("text contains token ids outside [0, vocab_size)")
    windows = _prefix_windows(ids, params.context_len, params.pad_id)[1:]
    logits, _, _ = _affine_forward(params, windows)
    logp = log_softmax(logits, axis=1)[np.arange(ids.size - 1), ids[1:]]
    surprisal = -np.maximum(logp, LOG_FLOOR)
    return float(np.exp(surprisal.mean()))


def _prefix_windows(ids: np.ndarray, context_len: int, pad_id: int) -> np.ndarray:
    """Row p is the padded context window for predicting ids[p] from ids[:p]."""
    padded = np.concatenate([np.full(context_len, pad_id, dtype=np.int64), ids])
    return np.lib.stride_tricks.sliding_window_view(padded, context_len)[: ids.size]


# ---------------------------------------------------------------------------
# input gradients (one-hot relaxation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurprisalTerm:
    """weight * (-log prob of `target` after base + continuation)."""

    continuation: tuple[int, ...]
    target: int
    weight: float = 1.0


@dataclass(frozen=True)
class KLReferenceTerm:
    """weight * KL(reference || model distribution after base + continuation)."""

    continuation: tuple[int, ...]
    reference: np.ndarray
    weight: float = 1.0


LossTerm = SurprisalTerm | KLReferenceTerm


def _check_span(base: Sequence[int], span: tuple[int, int]) -> None:
    start, stop = span
    if not (0 <= start <= stop <= len(base)):
        raise InputError(f"span {span} outside base sequence of length {len(base)}")


def _window_rows(
    params: ModelParams,
    base: Sequence[int],
    span: tuple[int, int],
    continuation: Sequence[int],
    relaxation: np.ndarray | None,
) -> np.ndarray:
    """(context_len, embed_dim) window embeddings for base + continuation.

    Positions inside `span` whose window slot is covered take their embedding
    from ``relaxation[j] @ embedding[:V]`` when a relaxation is given; all
    other slots use the discrete lookup (pad rows fill the left overhang).
    """
    c, d = params.context_len, params.embed_dim
    emb = params.embedding
    start, stop = span
    total = len(base) + len(continuation)
    rows = np.empty((c, d))
    for s in range(c):
        p = total - c + s
        if p < 0:
            rows[s] = emb[params.pad_id]
        elif relaxation is not None and start <= p < stop:
            rows[s] = relaxation[p - start] @ emb[: params.vocab_size]
        elif p < len(base):
            rows[s] = emb[base[p]]
        else:
            rows[s] = emb[continuation[p - len(base)]]
    return rows


def loss_value(
    params: ModelParams,
    base: Sequence[int],
    span: tuple[int, int],
    terms: Sequence[LossTerm],
    relaxation: np.ndarray | None = None,
) -> float:
    """Weighted sum of loss terms, optionally at a relaxed (non-one-hot) suffix.

    This is the scalar whose input gradient `input_gradient` returns; gradient
    checks can finite-difference it directly by perturbing `relaxation`.
    """
    _check_span(base, span)
    total = 0.0
    for term in terms:
        rows = _window_rows(params, base, span, term.continuation, relaxation)
        x = rows.reshape(-1)
        hidden = np.tanh(x @ params.w1 + params.b1)
        logq = log_softmax(hidden @ params.w2 + params.b2)
        if isinstance(term, SurprisalTerm):
            total += term.weight * -max(float(logq[term.target]), LOG_FLOOR)
        else:
            p = np.asarray(term.reference, dtype=np.float64)
            lq = np.maximum(logq, LOG_FLOOR)
            lp = np.log(np.maximum(p, PROB_FLOOR))
            total += term.weight * float(np.sum(np.where(p > 0.0, p * (lp - lq), 0.0)))
    return float(total)


def input_gradient(
    params: ModelParams,
    full_input: Sequence[int],
    suffix_span: tuple[int, int],
    terms: Sequence[LossTerm],
) -> np.ndarray:
    """Gradient of `loss_value` w.r.t. the one-hot rows of the suffix span.

    Shape (span_length, V).  Gradient flows through every term whose context
    window overlaps the span; span positions outside all windows stay zero.
    The derivative treats the loss as smooth (the probability floor is
    inactive whenever the floored probability exceeds PROB_FLOOR).
    """
    _check_span(full_input, suffix_span)
    start, stop = suffix_span
    v, c, d = params.vocab_size, params.context_len, params.embed_dim
    out = np.zeros((stop - start, v))
    emb_t = params.embedding[:v].T  # (d, V)
    for term in terms:
        rows = _window_rows(params, full_input, suffix_span, term.continuation, None)
        x = rows.reshape(-1)
        hidden = np.tanh(x @ params.w1 + params.b1)
        logits = hidden @ params.w2 + params.b2
        q = softmax(logits)
        if isinstance(term, SurprisalTerm):
            dlogits = q.copy()
            dlogits[term.target] -= 1.0
        else:
            dlogits = q - np.asarray(term.reference, dtype=np.float64)
        dhidden = dlogits @ params.w2.T
        dpre = dhidden * (1.0 - hidden * hidden)
        dx = (dpre @ params.w1.T).reshape(c, d)
        total = len(full_input) + len(term.continuation)
        for s in range(c):
            p = total - c + s
            if start <= p < stop:
                out[p - start] += term.weight * (dx[s] @ emb_t)
    return out


def one_hot(ids: Sequence[int], vocab_size: int) -> np.ndarray:
    """(len(ids), V) one-hot float matrix."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise InputError("token ids outside [0, vocab_size)")
    z = np.zeros((ids.size, vocab_size))
    z[np.arange(ids.size), ids] = 1.0
    return z


# ---------------------------------------------------------------------------
# training and distillation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch gradient descent settings."""

    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.5

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("invalid training settings")


def _validate_corpus(corpus: Sequence[int], vocab_size: int) -> np.ndarray:
    ids = np.asarray(corpus, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("corpus must be a non-empty 1-D token sequence")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise InputError("corpus contains token ids outside [0, vocab_size)")
    return ids


def _fit(
    arrays: dict[str, np.ndarray],
    windows: np.ndarray,
    targets: np.ndarray,
    soft: bool,
    hyper: TrainConfig,
    rng: np.random.Generator,
    on_epoch: EpochCallback | None,
) -> None:
    """SGD over (windows, targets) in place.  `soft` switches the loss from
    hard cross-entropy to KL against full target rows."""
    emb, w1, b1, w2, b2 = (arrays[k] for k in ("embedding", "w1", "b1", "w2", "b2"))
    n = windows.shape[0]
    c = windows.shape[1]
    d = emb.shape[1]
    lr = hyper.learning_rate
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            b = idx.size
            w = windows[idx]
            x = emb[w].reshape(b, c * d)
            hidden = np.tanh(x @ w1 + b1)
            logits = hidden @ w2 + b2
            logq = log_softmax(logits, axis=1)
            q = np.exp(logq)
            if soft:
                p = targets[idx]
                lp = np.log(np.maximum(p, PROB_FLOOR))
                losses.append(float(np.where(p > 0.0, p * (lp - logq), 0.0).sum(axis=1).mean()))
                dlogits = (q - p) / b
            else:
                y = targets[idx]
                rows = np.arange(b)
                losses.append(float(-logq[rows, y].mean()))
                dlogits = q
                dlogits[rows, y] -= 1.0
                dlogits /= b
            dw2 = hidden.T @ dlogits
            db2 = dlogits.sum(axis=0)
            dhidden = dlogits @ w2.T
            dpre = dhidden * (1.0 - hidden * hidden)
            dw1 = x.T @ dpre
            db1 = dpre.sum(axis=0)
            dx = (dpre @ w1.T).reshape(b, c, d)
            demb = np.zeros_like(emb)
            np.add.at(demb, w, dx)
            emb -= lr * demb
            w1 -= lr * dw1
            b1 -= lr * db1
            w2 -= lr * dw2
            b2 -= lr * db2
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)))


def train_target(
    corpus: Sequence[int],
    vocab_size: int,
    model: ModelConfig,
    hyper: TrainConfig,
    seed,
    on_epoch: EpochCallback | None = None,
) -> ModelParams:
    """Train a model on next-token cross-entropy over `corpus`.

    Initialization and batch order derive from `seed` alone, so repeated
    calls with identical arguments return identical parameters.
    """
    ids = _validate_corpus(corpus, vocab_size)
    if ids.size <= model.context_len:
        raise InputError("corpus must be longer than the context window")
    rng = np.random.default_rng(seed)
    init = random_params(vocab_size, model, rng)
    arrays = {
        "embedding": init.embedding.copy(),
        "w1": init.w1.copy(),
        "b1": init.b1.copy(),
        "w2": init.w2.copy(),
        "b2": init.b2.copy(),
    }
    windows = _prefix_windows(ids, model.context_len, vocab_size)[1:]
    targets = ids[1:]
    _fit(arrays, windows, targets, False, hyper, rng, on_epoch)
    return ModelParams(vocab_size=vocab_size, context_len=model.context_len, **arrays)


def distillation_kl(target: ModelParams, drafter: ModelParams, corpus: Sequence[int]) -> float:
    """Mean KL(target || drafter) over teacher-forced corpus prefix contexts."""
    ids = _validate_corpus(corpus, min(target.vocab_size, drafter.vocab_size))
    if ids.size < 2:
        raise InputError("corpus must contain at least 2 tokens")
    t_logits, _, _ = _affine_forward(target, _prefix_windows(ids, target.context_len, target.pad_id)[1:])
    d_logits, _, _ = _affine_forward(drafter, _prefix_windows(ids, drafter.context_len, drafter.pad_id)[1:])
    p = softmax(t_logits, axis=1)
    lp = log_softmax(t_logits, axis=1)
    lq = log_softmax(d_logits, axis=1)
    return float(np.where(p > 0.0, p * (lp - lq), 0.0).sum(axis=1).mean())


def distill_drafter(
    target: ModelParams,
    corpus: Sequence[int],
    capacity: ModelConfig,
    hyper: TrainConfig,
    seed,
    on_epoch: EpochCallback | None = None,
    enforce_capacity_gap: bool = True,
) -> ModelParams:
    """Distill a smaller drafter from `target` on soft full-distribution labels.

    The drafter minimizes mean KL(target || drafter) over the corpus prefix
    contexts the target was trained on.  `enforce_capacity_gap` rejects
    drafters at least as large as the target in both width dimensions; tests
    that need an equal-capacity distillation oracle may disable it.
    """
    if enforce_capacity_gap and (
        capacity.hidden_dim >= target.hidden_dim and capacity.embed_dim >= target.embed_dim
    ):
        raise ConfigError(
            "drafter capacity must be strictly smaller than the target "
            "(reduce hidden_dim and/or embed_dim)"
        )
    ids = _validate_corpus(corpus, target.vocab_size)
    if ids.size <= capacity.context_len:
        raise InputError("corpus must be longer than the drafter context window")
    t_logits, _, _ = _affine_forward(target, _prefix_windows(ids, target.context_len, target.pad_id)[1:])
    soft = softmax(t_logits, axis=1)
    rng = np.random.default_rng(seed)
    init = random_params(target.vocab_size, capacity, rng)
    arrays = {
        "embedding": init.embedding.copy(),
        "w1": init.w1.copy(),
        "b1": init.b1.copy(),
        "w2": init.w2.copy(),
        "b2": init.b2.copy(),
    }
    windows = _prefix_windows(ids, capacity.context_len, target.vocab_size)[1:]
    _fit(arrays, windows, soft, True, hyper, rng, on_epoch)
    return ModelParams(vocab_size=target.vocab_size, context_len=capacity.context_len, **arrays)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IIIII")  # version, V, C, d, h


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
    """Write a versioned binary checkpoint (atomically: temp file + rename).

    Layout: magic, header (version, V, C, d, h as little-endian uint32), then
    little-endian float64 arrays in row-major order: embedding (V+1, d),
    w1 (C*d, h), b1 (h,), w2 (h, V), b2 (V,).
    """
    v, c = params.vocab_size, params.context_len
    d, h = params.embed_dim, params.hidden_dim
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += _HEADER.pack(CHECKPOINT_VERSION, v, c, d, h)
    for arr in (params.embedding, params.w1, params.b1, params.w2, params.b2):
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    """Read a checkpoint written by `save_checkpoint`; rejects format mismatches."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise InputError("not a model checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, v, c, d, h = _HEADER.unpack_from(blob, off)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    off += _HEADER.size
    shapes = [(v + 1, d), (c * d, h), (h,), (h, v), (v,)]
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise InputError("checkpoint truncated")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
        off += nbytes
    if off != len(blob):
        raise InputError("checkpoint has trailing bytes")
    emb, w1, b1, w2, b2 = arrays
    return ModelParams(vocab_size=v, context_len=c, embedding=emb, w1=w1, b1=b1, w2=w2, b2=b2)
