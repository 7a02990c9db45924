"""Chain speculative decoding with exact accepted-length accounting.

One draft-then-verify cycle drafts K tokens autoregressively from the drafter
and verifies all K (plus one bonus position) against the target in a single
batched evaluation, which is accounted as one target forward pass.  The
stochastic mode uses the standard acceptance rule

    accept token y with probability min(1, pi(y) / rho(y))

and samples the fallback token from the normalized residual max(0, pi - rho),
which preserves the target distribution exactly.  Greedy mode accepts a draft
token iff it equals the target argmax and falls back to the target argmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, InternalError
from .tinylm import ModelParams, _affine_forward, context_window, forward, softmax

MODES = ("stochastic", "greedy")

TRACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DecodeConfig:
    draft_budget: int = 4  # tokens drafted per cycle
    max_tokens: int = 32
    mode: str = "stochastic"
    seed: int = 0
    drafter_cost_ratio: float = 0.1  # drafter forward cost relative to target

    def __post_init__(self) -> None:
        if self.draft_budget < 1 or self.max_tokens < 1:
            raise ConfigError("draft_budget and max_tokens must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0.0 <= self.drafter_cost_ratio <= 1.0:
            raise ConfigError("drafter_cost_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class CycleRecord:
    """Bookkeeping for one draft-then-verify cycle.

    `accept_probs` always stores min(1, pi/rho) for each drafted token,
    also in greedy mode where the accept decision is the argmax match.
    `committed` counts accepted drafts plus the fallback/bonus token.
    """

    cycle_index: int
    draft_tokens: tuple[int, ...]
    draft_probs: tuple[float, ...]
    target_probs: tuple[float, ...]
    accept_probs: tuple[float, ...]
    num_accepted: int
    fallback_token: int
    committed: int


@dataclass(frozen=True)
class DecodeTrace:
    prompt: tuple[int, ...]
    output: tuple[int, ...]
    cycles: tuple[CycleRecord, ...]
    target_forward_passes: int
    drafter_forward_passes: int
    tau: float
    mode: str
    seed: int


def acceptance_probability(target_prob, draft_prob):
    """min(1, pi/rho); broadcasts over arrays."""
    return np.minimum(1.0, np.asarray(target_prob, dtype=np.float64) / np.asarray(draft_prob, dtype=np.float64))


def residual_distribution(target_dist: np.ndarray, draft_dist: np.ndarray) -> np.ndarray:
    """Normalized positive part of (pi - rho), sampled on rejection."""
    residual = np.maximum(0.0, np.asarray(target_dist) - np.asarray(draft_dist))
    total = residual.sum()
    if total <= 0.0:
        # Only reachable when pi == rho, in which case rejection has
        # probability zero; a direct call with equal distributions is a bug.
        raise InternalError("residual distribution has no mass (pi == rho)")
    return residual / total


def sample_index(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Inverse-CDF draw; tolerant of sub-1e-9 normalization drift."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def draft_chain(
    drafter: ModelParams,
    context: Sequence[int],
    k: int,
    mode: str = "stochastic",
    rng: np.random.Generator | None = None,
) -> tuple[list[int], list[np.ndarray]]:
    """Draft k tokens autoregressively; returns tokens and the full drafter
    distribution at each step.  Consumes exactly k drafter forward passes."""
    if k < 1:
        raise InputError("draft budget must be >= 1")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if mode == "stochastic" and rng is None:
        raise InputError("stochastic drafting requires an rng")
    seq = list(context)
    tokens: list[int] = []
    dists: list[np.ndarray] = []
    for _ in range(k):
        probs = forward(drafter, seq)
        tok = int(np.argmax(probs)) if mode == "greedy" else sample_index(rng, probs)
        tokens.append(tok)
        dists.append(probs)
        seq.append(tok)
    return tokens, dists


def verify_tokens(
    draft_tokens: Sequence[int],
    draft_dists: Sequence[np.ndarray],
    target_dists: np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
) -> tuple[int, np.ndarray, np.ndarray, np.ndarray, int]:
    """Acceptance walk over one drafted chain.

    `target_dists` has k+1 rows; the extra final row is the bonus-position
    distribution used when every draft is accepted.  Returns
    (num_accepted, draft_probs, target_probs, accept_probs, fallback_token).
    """
    k = len(draft_tokens)
    if target_dists.shape[0] != k + 1:
        raise InputError("target_dists must have one row per draft position plus a bonus row")
    target_p = np.empty(k)
    draft_p = np.empty(k)
    for i in range(k):
        tok = int(draft_tokens[i])
        target_p[i] = target_dists[i, tok]
        draft_p[i] = draft_dists[i][tok]
        if draft_p[i] <= 0.0:
            raise InternalError("drafter reported zero probability for its own drafted token")
    alphas = np.minimum(1.0, target_p / draft_p)
    num_accepted = k
    fallback = None
    for i in range(k):
        if mode == "greedy":
            ok = int(draft_tokens[i]) == int(np.argmax(target_dists[i]))
        else:
            ok = rng.random() < alphas[i]
        if not ok:
            num_accepted = i
            if mode == "greedy":
                fallback = int(np.argmax(target_dists[i]))
            else:
                fallback = sample_index(rng, residual_distribution(target_dists[i], draft_dists[i]))
            break
    if fallback is None:
        if mode == "greedy":
            fallback = int(np.argmax(target_dists[k]))
        else:
            fallback = sample_index(rng, target_dists[k])
    return num_accepted, draft_p, target_p, alphas, fallback


def verify_chain(
    target: ModelParams,
    context: Sequence[int],
    draft_tokens: Sequence[int],
    draft_dists: Sequence[np.ndarray],
    mode: str,
    rng: np.random.Generator | None = None,
    cycle_index: int = 0,
) -> CycleRecord:
    """Verify one drafted chain against the target.

    The k+1 verified positions are evaluated in a single batched forward,
    which the accounting counts as one target forward pass per cycle.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    k = len(draft_tokens)
    windows = np.empty((k + 1, target.context_len), dtype=np.int64)
    seq = list(context)
    for i in range(k + 1):
        windows[i] = context_window(target, seq)
        if i < k:
            seq.append(int(draft_tokens[i]))
    logits, _, _ = _affine_forward(target, windows)
    target_dists = softmax(logits, axis=1)
    num_accepted, draft_p, target_p, alphas, fallback = verify_tokens(
        draft_tokens, draft_dists, target_dists, mode, rng
    )
    return CycleRecord(
        cycle_index=cycle_index,
        draft_tokens=tuple(int(t) for t in draft_tokens),
        draft_probs=tuple(float(p) for p in draft_p),
        target_probs=tuple(float(p) for p in target_p),
        accept_probs=tuple(float(a) for a in alphas),
        num_accepted=int(num_accepted),
        fallback_token=int(fallback),
        committed=int(num_accepted) + 1,
    )


def speculative_decode(
    target: ModelParams,
    drafter: ModelParams,
    prompt: Sequence[int],
    config: DecodeConfig,
) -> DecodeTrace:
    """Alternate draft and verify cycles until `max_tokens` are committed.

    The final cycle's surplus committed tokens are dropped from the output,
    so tau = len(output) / target_forward_passes holds exactly.
    """
    prompt = tuple(int(t) for t in prompt)
    if not prompt:
        raise InputError("prompt must be non-empty")
    rng = np.random.default_rng(config.seed)
    context = list(prompt)
    committed: list[int] = []
    cycles: list[CycleRecord] = []
    while len(committed) < config.max_tokens:
        tokens, dists = draft_chain(drafter, context, config.draft_budget, config.mode, rng)
        record = verify_chain(target, context, tokens, dists, config.mode, rng, cycle_index=len(cycles))
        cycle_tokens = list(record.draft_tokens[: record.num_accepted]) + [record.fallback_token]
        committed.extend(cycle_tokens)
        context.extend(cycle_tokens)
        cycles.append(record)
    output = tuple(committed[: config.max_tokens])
    return DecodeTrace(
        prompt=prompt,
        output=output,
        cycles=tuple(cycles),
        target_forward_passes=len(cycles),
        drafter_forward_passes=config.draft_budget * len(cycles),
        tau=len(output) / len(cycles),
        mode=config.mode,
        seed=config.seed,
    )


def autoregressive_decode(
    target: ModelParams,
    prompt: Sequence[int],
    max_tokens: int,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
) -> tuple[int, ...]:
    """Plain one-token-per-forward-pass decoding (the speedup baseline)."""
    prompt = tuple(int(t) for t in prompt)
    if not prompt:
        raise InputError("prompt must be non-empty")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if mode == "stochastic" and rng is None:
        raise InputError("stochastic decoding requires an rng")
    seq = list(prompt)
    out: list[int] = []
    for _ in range(max_tokens):
        probs = forward(target, seq)
        tok = int(np.argmax(probs)) if mode == "greedy" else sample_index(rng, probs)
        out.append(tok)
        seq.append(tok)
    return tuple(out)


def speedup_proxy(trace: DecodeTrace, config: DecodeConfig) -> float:
    """Cost-model speedup: output tokens / (target passes + c * drafter passes).

    With c = 0 this equals tau; with c > 0 it charges the drafter a fraction
    of a target forward per call.
    """
    cost = trace.target_forward_passes + config.drafter_cost_ratio * trace.drafter_forward_passes
    return len(trace.output) / cost


# ---------------------------------------------------------------------------
# trace (de)serialization
# ---------------------------------------------------------------------------


def trace_to_dict(trace: DecodeTrace) -> dict:
    return {
        "schema_version": TRACE_SCHEMA_VERSION,
        "prompt": list(trace.prompt),
        "output": list(trace.output),
        "cycles": [
            {
                "cycle_index": c.cycle_index,
                "draft_tokens": list(c.draft_tokens),
                "draft_probs": list(c.draft_probs),
                "target_probs": list(c.target_probs),
                "accept_probs": list(c.accept_probs),
                "num_accepted": c.num_accepted,
                "fallback_token": c.fallback_token,
                "committed": c.committed,
            }
            for c in trace.cycles
        ],
        "target_forward_passes": trace.target_forward_passes,
        "drafter_forward_passes": trace.drafter_forward_passes,
        "tau": trace.tau,
        "mode": trace.mode,
        "seed": trace.seed,
    }


def trace_from_dict(data: dict) -> DecodeTrace:
    if data.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise InputError(f"unsupported trace schema version {data.get('schema_version')!r}")
    cycles = tuple(
        CycleRecord(
            cycle_index=int(c["cycle_index"]),
            draft_tokens=tuple(int(t) for t in c["draft_tokens"]),
            draft_probs=tuple(float(p) for p in c["draft_probs"]),
            target_probs=tuple(float(p) for p in c["target_probs"]),
            accept_probs=tuple(float(p) for p in c["accept_probs"]),
            num_accepted=int(c["num_accepted"]),
            fallback_token=int(c["fallback_token"]),
            committed=int(c["committed"]),
        )
        for c in data["cycles"]
    )
    return DecodeTrace(
        prompt=tuple(int(t) for t in data["prompt"]),
        output=tuple(int(t) for t in data["output"]),
        cycles=cycles,
        target_forward_passes=int(data["target_forward_passes"]),
        drafter_forward_passes=int(data["drafter_forward_passes"]),
        tau=float(data["tau"]),
        mode=str(data["mode"]),
        seed=int(data["seed"]),
    )
