"""Acceleration-collapse suffix optimizer.

The attack appends a short discrete suffix to a clean prompt and optimizes it
so that drafter-proposed tokens become improbable under the target verifier
(raising their rejection rate and collapsing the accepted length), while a KL
bound on the target's own next-token distributions at clean-continuation
anchor positions keeps visible behavior close to clean.

Each iteration scores single-token substitutions with a gradient direction
built from two input-gradients: the rejection gradient is first projected
onto the null space of the semantic-drift gradient (a rank-one operation for
this scalar constraint), then combined with a feasibility-restoring term.
Candidates are re-evaluated by forward passes and filtered by a KL-bound
veto; the incumbent suffix is only replaced by a feasible candidate that
strictly increases the rejection objective, which makes the incumbent's
rejection loss non-decreasing and keeps every iterate feasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, InternalError
from .specdec import draft_chain, speculative_decode, verify_chain, DecodeConfig
from .tinylm import (
    KLReferenceTerm,
    LOG_FLOOR,
    PROB_FLOOR,
    ModelParams,
    SurprisalTerm,
    Vocabulary,
    forward,
    input_gradient,
    log_forward_batch,
    one_hot,
)

VARIANTS = ("full", "rej-only", "sem-only", "naive-joint")

# KL-bound presets calibrated for large-vocabulary chat models; desk-scale
# character models drift far less, hence the small default in AttackConfig.
KL_BOUND_PRESETS = {"gsm8k": 5.0, "mtbench": 7.0, "humaneval": 15.0}


@dataclass(frozen=True)
class AttackConfig:
    suffix_len: int = 20
    iterations: int = 50
    top_k: int = 8  # substitutions kept per suffix position
    batch: int = 64  # candidates evaluated per iteration
    kl_bound: float = 0.5
    rej_weight: float = 2.0
    damping: float = 1e-8
    sem_positions: int = 20  # anchor positions for the drift estimate
    attack_cycles: int = 4  # decode cycles whose drafted tokens are attacked
    draft_budget: int = 4  # drafting budget used while collecting positions
    seed: int = 0
    init_token: int | None = None  # neutral init token; None = most frequent in prompt

    def __post_init__(self) -> None:
        if min(self.suffix_len, self.batch, self.sem_positions, self.attack_cycles, self.draft_budget) < 1:
            raise ConfigError("suffix_len, batch, sem_positions, attack_cycles, draft_budget must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.kl_bound <= 0.0 or self.damping <= 0.0:
            raise ConfigError("kl_bound and damping must be positive")
        if self.rej_weight < 0.0:
            raise ConfigError("rej_weight must be nonnegative")


@dataclass(frozen=True)
class AttackedPosition:
    """One drafter-proposed token with its exact conditioning context."""

    cycle: int
    position: int
    context: tuple[int, ...]  # suffixed prompt + committed prefix + earlier drafts
    draft_token: int


@dataclass(frozen=True)
class SemanticAnchor:
    """Clean-continuation prefix and the target's clean distribution there."""

    position: int
    prefix: tuple[int, ...]
    distribution: np.ndarray


@dataclass(frozen=True)
class IterationRecord:
    loss_rej: float
    loss_sem: float
    accepted: bool
    delta: tuple[int, ...]  # incumbent suffix at the end of the iteration


@dataclass
class SuffixState:
    delta: tuple[int, ...]
    relaxation: np.ndarray  # (m, V) one-hot rows consistent with delta
    loss_rej: float
    loss_sem: float
    iteration: int
    history: list[IterationRecord] = field(default_factory=list)


@dataclass(frozen=True)
class ObjectiveGradients:
    grad_rej: np.ndarray
    grad_sem: np.ndarray
    grad_rej_null: np.ndarray
    grad_final: np.ndarray


@dataclass(frozen=True)
class VetoSelection:
    suffix: tuple[int, ...]
    loss_rej: float
    loss_sem: float


@dataclass(frozen=True)
class TransferResult:
    """Per-prompt accepted lengths for one drafter, clean vs suffixed."""

    clean_tau: tuple[float, ...]
    attacked_tau: tuple[float, ...]


# ---------------------------------------------------------------------------
# attacked positions and anchors
# ---------------------------------------------------------------------------


def collect_attacked_positions(
    target: ModelParams,
    drafter: ModelParams,
    x_delta: Sequence[int],
    config: AttackConfig,
) -> list[AttackedPosition]:
    """Run greedy draft-then-verify cycles on the suffixed prompt and record
    every drafted token with the exact context it was proposed under.

    Greedy drafting keeps the collected set deterministic, so losses and
    gradients are stable across recomputations within an iteration.
    """
    x_delta = tuple(int(t) for t in x_delta)
    if not x_delta:
        raise InputError("x_delta must be non-empty")
    context = list(x_delta)
    entries: list[AttackedPosition] = []
    for cycle in range(config.attack_cycles):
        tokens, dists = draft_chain(drafter, context, config.draft_budget, "greedy")
        for i, tok in enumerate(tokens):
            entries.append(
                AttackedPosition(
                    cycle=cycle,
                    position=i,
                    context=tuple(context) + tuple(tokens[:i]),
                    draft_token=int(tok),
                )
            )
        record = verify_chain(target, context, tokens, dists, "greedy", cycle_index=cycle)
        context.extend(record.draft_tokens[: record.num_accepted])
        context.append(record.fallback_token)
    return entries


def build_semantic_anchors(
    target: ModelParams,
    x: Sequence[int],
    num_positions: int,
) -> list[SemanticAnchor]:
    """Greedy-decode the clean continuation of `x` and cache the target's
    distribution at each prefix; anchors depend only on the clean prompt."""
    x = tuple(int(t) for t in x)
    if not x:
        raise InputError("prompt must be non-empty")
    if num_positions < 1:
        raise InputError("num_positions must be >= 1")
    anchors: list[SemanticAnchor] = []
    prefix: list[int] = []
    for t in range(num_positions):
        dist = forward(target, x + tuple(prefix))
        anchors.append(SemanticAnchor(position=t, prefix=tuple(prefix), distribution=dist))
        prefix.append(int(np.argmax(dist)))
    return anchors


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def rejection_loss(target: ModelParams, positions: Sequence[AttackedPosition]) -> float:
    """Mean target-side surprisal of the drafted tokens (floored log)."""
    if not positions:
        raise InputError("no attacked positions")
    logp = log_forward_batch(target, [p.context for p in positions])
    rows = np.arange(len(positions))
    toks = np.array([p.draft_token for p in positions])
    return float(-np.maximum(logp[rows, toks], LOG_FLOOR).mean())


def semantic_loss(
    target: ModelParams,
    anchors: Sequence[SemanticAnchor],
    x_delta: Sequence[int],
) -> float:
    """Mean KL(clean || adversarial) of the target's next-token distribution
    at the anchor positions, with the adversarial side floored inside the log."""
    if not anchors:
        raise InputError("no semantic anchors")
    x_delta = tuple(int(t) for t in x_delta)
    total = 0.0
    for anchor in anchors:
        # Per-anchor forward mirrors how the cached clean distribution was
        # computed, so an unchanged context yields bitwise-equal logs and an
        # exactly zero loss.
        q = forward(target, x_delta + anchor.prefix)
        logq = np.log(np.maximum(q, PROB_FLOOR))
        p = anchor.distribution
        logp = np.log(np.maximum(p, PROB_FLOOR))
        total += float(np.where(p > 0.0, p * (logp - logq), 0.0).sum())
    return total / len(anchors)


def rejection_terms(positions: Sequence[AttackedPosition], base_len: int) -> list[SurprisalTerm]:
    """Surprisal terms for `input_gradient`, one per attacked position,
    weighted so their sum equals the mean in `rejection_loss`."""
    w = 1.0 / len(positions)
    terms = []
    for p in positions:
        if len(p.context) < base_len:
            raise InputError("attacked-position context shorter than the suffixed prompt")
        terms.append(SurprisalTerm(continuation=p.context[base_len:], target=p.draft_token, weight=w))
    return terms


def semantic_terms(anchors: Sequence[SemanticAnchor]) -> list[KLReferenceTerm]:
    """KL terms for `input_gradient`, one per anchor, averaged like `semantic_loss`."""
    w = 1.0 / len(anchors)
    return [KLReferenceTerm(continuation=a.prefix, reference=a.distribution, weight=w) for a in anchors]


def null_space_project(grad_rej: np.ndarray, grad_sem: np.ndarray, damping: float) -> np.ndarray:
    """Remove from grad_rej its component along grad_sem (damped).

    Rank-one specialization of the null-space projector for a scalar
    constraint; with damping -> 0 the output is exactly orthogonal to
    grad_sem.
    """
    if grad_rej.shape != grad_sem.shape:
        raise InputError("gradient shapes must match")
    a = grad_rej.reshape(-1)
    b = grad_sem.reshape(-1)
    coef = float(a @ b) / (float(b @ b) + damping)
    return (a - coef * b).reshape(grad_rej.shape)


def final_direction(grad_sem: np.ndarray, grad_rej_null: np.ndarray, rej_weight: float) -> np.ndarray:
    """Scoring direction: feasibility restoration plus weighted null-space rejection."""
    if grad_sem.shape != grad_rej_null.shape:
        raise InputError("gradient shapes must match")
    return -grad_sem + rej_weight * grad_rej_null


def objective_gradients(
    target: ModelParams,
    x_delta: Sequence[int],
    suffix_span: tuple[int, int],
    positions: Sequence[AttackedPosition],
    anchors: Sequence[SemanticAnchor],
    config: AttackConfig,
) -> ObjectiveGradients:
    """Both input-gradients plus the projected and combined directions."""
    base_len = len(x_delta)
    grad_rej = input_gradient(target, x_delta, suffix_span, rejection_terms(positions, base_len))
    grad_sem = input_gradient(target, x_delta, suffix_span, semantic_terms(anchors))
    grad_rej_null = null_space_project(grad_rej, grad_sem, config.damping)
    grad_final = final_direction(grad_sem, grad_rej_null, config.rej_weight)
    return ObjectiveGradients(grad_rej, grad_sem, grad_rej_null, grad_final)


# ---------------------------------------------------------------------------
# candidate proposal and selection
# ---------------------------------------------------------------------------


def propose_candidates(
    state: SuffixState,
    grad_final: np.ndarray,
    top_k: int,
    batch: int,
    rng: np.random.Generator,
) -> list[tuple[int, ...]]:
    """Gradient-guided single-token substitutions.

    The substitution score of putting token v at position j is
    grad_final[j, v] - grad_final[j, current token], the first-order predicted
    objective increase along the direction.  The top_k substitutions per
    position are pooled and `batch` of them are sampled uniformly without
    replacement (the whole pool if it is smaller).
    """
    m, v = grad_final.shape
    delta = state.delta
    if len(delta) != m:
        raise InputError("gradient shape inconsistent with suffix length")
    if batch < 1:
        raise InputError("batch must be >= 1")
    if top_k > v:
        raise InputError("top_k cannot exceed the vocabulary size")
    pool: list[tuple[int, int]] = []
    keep = min(top_k, v - 1)
    for j in range(m):
        scores = grad_final[j] - grad_final[j, delta[j]]
        scores[delta[j]] = -np.inf  # a candidate must differ from the incumbent
        order = np.argsort(-scores, kind="stable")[:keep]
        pool.extend((j, int(tok)) for tok in order)
    if batch >= len(pool):
        chosen = pool
    else:
        idx = rng.permutation(len(pool))[:batch]
        chosen = [pool[i] for i in idx]
    candidates = []
    for j, tok in chosen:
        cand = list(delta)
        cand[j] = tok
        candidates.append(tuple(cand))
    return candidates


def evaluate_suffix(
    target: ModelParams,
    drafter: ModelParams,
    x: Sequence[int],
    suffix: Sequence[int],
    anchors: Sequence[SemanticAnchor],
    config: AttackConfig,
) -> tuple[float, float]:
    """Fresh forward evaluation of one suffix: (rejection loss, semantic loss)."""
    x_delta = tuple(x) + tuple(suffix)
    positions = collect_attacked_positions(target, drafter, x_delta, config)
    return rejection_loss(target, positions), semantic_loss(target, anchors, x_delta)


def kl_veto_select(
    target: ModelParams,
    drafter: ModelParams,
    x: Sequence[int],
    candidates: Sequence[Sequence[int]],
    anchors: Sequence[SemanticAnchor],
    config: AttackConfig,
) -> VetoSelection | None:
    """Re-evaluate every candidate, veto those whose semantic loss exceeds the
    KL bound, and return the feasible candidate with the largest rejection
    loss (ties broken by lowest candidate index).  Returns None when no
    candidate survives the veto; the caller then keeps its incumbent."""
    if not candidates:
        raise InputError("no candidates to select from")
    best: VetoSelection | None = None
    for cand in candidates:
        cand = tuple(int(t) for t in cand)
        loss_rej, loss_sem = evaluate_suffix(target, drafter, x, cand, anchors, config)
        if loss_sem > config.kl_bound:
            continue
        if best is None or loss_rej > best.loss_rej:
            best = VetoSelection(cand, loss_rej, loss_sem)
    return best


# ---------------------------------------------------------------------------
# optimization loop
# ---------------------------------------------------------------------------


def _initial_suffix(
    target: ModelParams,
    x: tuple[int, ...],
    anchors: Sequence[SemanticAnchor],
    config: AttackConfig,
    rng: np.random.Generator,
) -> tuple[int, ...]:
    v = target.vocab_size
    if config.init_token is not None:
        if not 0 <= config.init_token < v:
            raise ConfigError("init_token outside the vocabulary")
        neutral = int(config.init_token)
    else:
        neutral = int(np.argmax(np.bincount(np.asarray(x), minlength=v)))
    delta = (neutral,) * config.suffix_len
    for _ in range(17):  # neutral try + 16 uniform resamples
        if semantic_loss(target, anchors, x + delta) <= config.kl_bound:
            return delta
        delta = tuple(int(t) for t in rng.integers(0, v, size=config.suffix_len))
    raise ConfigError("could not find a feasible initial suffix within the KL bound")


def _score_direction(grads: ObjectiveGradients, variant: str, config: AttackConfig) -> np.ndarray:
    if variant == "full":
        return grads.grad_final
    if variant == "rej-only":
        return grads.grad_rej
    if variant == "sem-only":
        return -grads.grad_sem
    # naive-joint: weighted combination without the projection
    return -grads.grad_sem + config.rej_weight * grads.grad_rej


def _run_attack(
    target: ModelParams,
    drafter: ModelParams,
    x: Sequence[int],
    config: AttackConfig,
    variant: str,
) -> SuffixState:
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    x = tuple(int(t) for t in x)
    if not x:
        raise InputError("prompt must be non-empty")
    v = target.vocab_size
    rng = np.random.default_rng(config.seed)
    anchors = build_semantic_anchors(target, x, config.sem_positions)
    delta = _initial_suffix(target, x, anchors, config, rng)
    loss_rej, loss_sem = evaluate_suffix(target, drafter, x, delta, anchors, config)
    history: list[IterationRecord] = []
    span = (len(x), len(x) + config.suffix_len)
    vetoed = variant in ("full", "naive-joint")
    for iteration in range(1, config.iterations + 1):
        x_delta = x + delta
        positions = collect_attacked_positions(target, drafter, x_delta, config)
        loss_rej = rejection_loss(target, positions)
        loss_sem = semantic_loss(target, anchors, x_delta)
        grads = objective_gradients(target, x_delta, span, positions, anchors, config)
        state = SuffixState(delta, one_hot(delta, v), loss_rej, loss_sem, iteration - 1, list(history))
        candidates = propose_candidates(state, _score_direction(grads, variant, config), config.top_k, config.batch, rng)
        accepted = False
        if vetoed:
            picked = kl_veto_select(target, drafter, x, candidates, anchors, config)
            if picked is not None and picked.loss_rej > loss_rej:
                delta, loss_rej, loss_sem = picked.suffix, picked.loss_rej, picked.loss_sem
                accepted = True
        elif variant == "rej-only":
            best = None
            for cand in candidates:
                l_rej, l_sem = evaluate_suffix(target, drafter, x, cand, anchors, config)
                if best is None or l_rej > best[1]:
                    best = (cand, l_rej, l_sem)
            if best is not None and best[1] > loss_rej:
                delta, loss_rej, loss_sem = best
                accepted = True
        else:  # sem-only: drive the drift estimate down
            best = None
            for cand in candidates:
                l_rej, l_sem = evaluate_suffix(target, drafter, x, cand, anchors, config)
                if best is None or l_sem < best[2]:
                    best = (cand, l_rej, l_sem)
            if best is not None and best[2] < loss_sem:
                delta, loss_rej, loss_sem = best
                accepted = True
        if vetoed and loss_sem > config.kl_bound:
            raise InternalError("feasibility invariant violated: incumbent exceeds the KL bound")
        history.append(IterationRecord(loss_rej, loss_sem, accepted, delta))
    return SuffixState(
        delta=delta,
        relaxation=one_hot(delta, v),
        loss_rej=loss_rej,
        loss_sem=loss_sem,
        iteration=config.iterations,
        history=history,
    )


def optimize_suffix(
    target: ModelParams,
    drafter: ModelParams,
    x: Sequence[int],
    config: AttackConfig,
) -> SuffixState:
    """Run the full null-space-guided suffix optimization.

    The returned suffix always satisfies the KL bound: the initial suffix is
    required to be feasible and every accepted update passed the veto.
    """
    return _run_attack(target, drafter, x, config, "full")


def ablation_run(
    target: ModelParams,
    drafter: ModelParams,
    x: Sequence[int],
    config: AttackConfig,
    variant: str,
) -> SuffixState:
    """Component ablations sharing the full loop's proposal machinery.

    rej-only scores with the raw rejection gradient and skips the veto;
    sem-only descends the drift estimate alone; naive-joint combines both
    gradients without the projection but keeps the veto; full is identical
    to `optimize_suffix`.
    """
    return _run_attack(target, drafter, x, config, variant)


def transfer_evaluate(
    suffix: Sequence[int],
    target: ModelParams,
    drafters: Sequence[ModelParams],
    prompts: Sequence[Sequence[int]],
    decode_config: DecodeConfig,
) -> list[TransferResult]:
    """Accepted length per prompt for each drafter, with and without the
    suffix, under the identical decode configuration."""
    suffix = tuple(int(t) for t in suffix)
    results = []
    for drafter in drafters:
        clean = []
        attacked = []
        for prompt in prompts:
            prompt = tuple(int(t) for t in prompt)
            clean.append(speculative_decode(target, drafter, prompt, decode_config).tau)
            attacked.append(speculative_decode(target, drafter, prompt + suffix, decode_config).tau)
        results.append(TransferResult(tuple(clean), tuple(attacked)))
    return results


def attack_record(
    state: SuffixState,
    config: AttackConfig,
    variant: str = "full",
    prompt_id: int | None = None,
    vocab: Vocabulary | None = None,
) -> dict:
    """JSON-ready structured record of one attack run.

    With a vocabulary, every suffix (per iteration and final) is also
    rendered as text.
    """
    history = []
    for i, r in enumerate(state.history):
        entry = {
            "iteration": i + 1,
            "loss_rej": r.loss_rej,
            "loss_sem": r.loss_sem,
            "accepted": r.accepted,
            "suffix": list(r.delta),
        }
        if vocab is not None:
            entry["suffix_text"] = vocab.decode(r.delta)
        history.append(entry)
    record = {
        "schema_version": 1,
        "variant": variant,
        "seed": config.seed,
        "config": {
            "suffix_len": config.suffix_len,
            "iterations": config.iterations,
            "top_k": config.top_k,
            "batch": config.batch,
            "kl_bound": config.kl_bound,
            "rej_weight": config.rej_weight,
            "damping": config.damping,
            "sem_positions": config.sem_positions,
            "attack_cycles": config.attack_cycles,
            "draft_budget": config.draft_budget,
            "init_token": config.init_token,
        },
        "final_suffix": list(state.delta),
        "final_loss_rej": state.loss_rej,
        "final_loss_sem": state.loss_sem,
        "iterations_run": state.iteration,
        "history": history,
    }
    if prompt_id is not None:
        record["prompt_id"] = prompt_id
    if vocab is not None:
        record["final_suffix_text"] = vocab.decode(state.delta)
    return record
