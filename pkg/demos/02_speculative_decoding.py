#!/usr/bin/env python3
"""Chain speculative decoding: the acceptance rule, accepted length, speedup.

Walks one draft-then-verify cycle in detail, then measures the average
accepted length tau over the prompt set, in both stochastic and greedy modes,
and shows the accepted-length histogram and survival curve that summarize
where the speedup comes from.
"""

from pathlib import Path

import numpy as np

from speclab import (
    DecodeConfig,
    ModelConfig,
    TrainConfig,
    Vocabulary,
    accepted_length_stats,
    acceptance_probability,
    autoregressive_decode,
    distill_drafter,
    draft_chain,
    residual_distribution,
    speculative_decode,
    speedup_proxy,
    train_target,
    verify_chain,
)

DATA = Path(__file__).parent / "data"
text = (DATA / "corpus.txt").read_text()
vocab = Vocabulary.from_text(text)
corpus = vocab.encode(text)
target = train_target(corpus, vocab.size, ModelConfig(12, 16, 128), TrainConfig(30, 64, 0.5), seed=1)
drafter = distill_drafter(target, corpus, ModelConfig(12, 8, 16), TrainConfig(30, 64, 0.5), seed=2)

# --- the acceptance rule on one cycle ---------------------------------------
prompt = vocab.encode("the cat sat ")
rng = np.random.default_rng(0)
tokens, dists = draft_chain(drafter, prompt, 4, "stochastic", rng)
record = verify_chain(target, prompt, tokens, dists, "stochastic", rng)
print("one draft-then-verify cycle on 'the cat sat ':")
for i, tok in enumerate(record.draft_tokens):
    mark = "accepted" if i < record.num_accepted else "rejected"
    print(f"  draft {vocab.symbols[tok]!r}: rho={record.draft_probs[i]:.3f} "
          f"pi={record.target_probs[i]:.3f} alpha={record.accept_probs[i]:.3f} -> {mark}")
print(f"  fallback/bonus token: {vocab.symbols[record.fallback_token]!r}; committed {record.committed}")

# the rule in isolation: alpha = min(1, pi/rho), fallback from max(0, pi-rho)
pi = np.array([0.6, 0.4])
rho = np.array([0.2, 0.8])
print(f"\nworked example: pi={pi}, rho={rho}")
print(f"  alpha(token 1) = min(1, 0.4/0.8) = {float(acceptance_probability(pi[1], rho[1])):.2f}")
print(f"  residual after rejecting it     = {residual_distribution(pi, rho)}")

# --- accepted length over the prompt set ------------------------------------
prompts = [vocab.encode(line) for line in (DATA / "prompts.txt").read_text().splitlines()]
for mode in ("stochastic", "greedy"):
    cfg = DecodeConfig(draft_budget=4, max_tokens=24, mode=mode, seed=7)
    traces = [speculative_decode(target, drafter, p, cfg) for p in prompts]
    taus = [t.tau for t in traces]
    proxies = [speedup_proxy(t, cfg) for t in traces]
    print(f"\n{mode}: mean tau {np.mean(taus):.2f} (min {min(taus):.2f}, max {max(taus):.2f}), "
          f"mean speedup proxy {np.mean(proxies):.2f} at drafter cost c={cfg.drafter_cost_ratio}")
    stats = accepted_length_stats(traces)
    print("  committed-per-cycle histogram:", {a: round(f, 3) for a, f in stats.histogram.items()})
    print("  survival P(a >= k):           ", {k: round(p, 3) for k, p in stats.survival.items()})

# greedy speculative decoding reproduces greedy autoregressive decoding exactly
cfg = DecodeConfig(draft_budget=4, max_tokens=24, mode="greedy", seed=0)
trace = speculative_decode(target, drafter, prompts[0], cfg)
assert trace.output == autoregressive_decode(target, prompts[0], 24, "greedy")
print("\ngreedy speculative output == greedy autoregressive output (checked)")
print(f"sample output: {vocab.decode(trace.output)!r}")
