#!/usr/bin/env python3
"""The acceleration-collapse attack on a single prompt, step by step.

Shows the two objectives (target-side surprisal of drafted tokens, and the
KL drift bound at clean-continuation anchors), the rank-one null-space
projection that reconciles them, and the discrete search with the KL veto.
Ends with the before/after accepted length and the visible outputs.
"""

from pathlib import Path

import numpy as np

from speclab import (
    AttackConfig,
    DecodeConfig,
    ModelConfig,
    TrainConfig,
    Vocabulary,
    build_semantic_anchors,
    collect_attacked_positions,
    distill_drafter,
    null_space_project,
    optimize_suffix,
    rejection_loss,
    semantic_loss,
    speculative_decode,
    train_target,
)
from speclab.attack import objective_gradients

DATA = Path(__file__).parent / "data"
text = (DATA / "corpus.txt").read_text()
vocab = Vocabulary.from_text(text)
corpus = vocab.encode(text)
target = train_target(corpus, vocab.size, ModelConfig(12, 16, 128), TrainConfig(30, 64, 0.5), seed=1)
drafter = distill_drafter(target, corpus, ModelConfig(12, 8, 16), TrainConfig(30, 64, 0.5), seed=2)

prompt = vocab.encode("the cat sat ")
space = vocab.encode(" ")[0]
config = AttackConfig(
    suffix_len=8, iterations=50, top_k=8, batch=64, kl_bound=0.5, rej_weight=2.0,
    damping=1e-8, sem_positions=12, attack_cycles=4, draft_budget=4, seed=0, init_token=space,
)

# --- the two objectives at the (feasible) initial suffix ---------------------
delta0 = (space,) * config.suffix_len
x_delta = tuple(prompt) + delta0
positions = collect_attacked_positions(target, drafter, x_delta, config)
anchors = build_semantic_anchors(target, prompt, config.sem_positions)
print(f"attacked positions collected: {len(positions)} drafted tokens over {config.attack_cycles} cycles")
print(f"initial rejection loss (mean drafted-token surprisal): {rejection_loss(target, positions):.3f}")
print(f"initial semantic loss (mean anchor KL):                 {semantic_loss(target, anchors, x_delta):.3f}"
      f"  (bound {config.kl_bound})")

grads = objective_gradients(target, x_delta, (len(prompt), len(x_delta)), positions, anchors, config)
cos = float(np.sum(grads.grad_rej * grads.grad_sem)) / (
    np.linalg.norm(grads.grad_rej) * np.linalg.norm(grads.grad_sem)
)
print(f"\ngradient entanglement: cos(g_rej, g_sem) = {cos:.3f}")
projected = null_space_project(grads.grad_rej, grads.grad_sem, config.damping)
print(f"after projection: cos = "
      f"{float(np.sum(projected * grads.grad_sem)) / (np.linalg.norm(projected) * np.linalg.norm(grads.grad_sem)):.2e}")

# --- the full optimization loop ----------------------------------------------
state = optimize_suffix(target, drafter, prompt, config)
print("\niteration history (rejection loss / semantic loss / candidate accepted):")
for i, rec in enumerate(state.history):
    if i % 10 == 0 or rec.accepted:
        print(f"  iter {i + 1:3d}: {rec.loss_rej:.3f} / {rec.loss_sem:.3f} / {rec.accepted}")
print(f"final suffix: {vocab.decode(state.delta)!r}  (feasible: {state.loss_sem <= config.kl_bound})")

# --- the collapse -------------------------------------------------------------
decode = DecodeConfig(draft_budget=4, max_tokens=24, mode="greedy", seed=0)
clean = speculative_decode(target, drafter, prompt, decode)
attacked = speculative_decode(target, drafter, tuple(prompt) + state.delta, decode)
print(f"\nclean    tau {clean.tau:.2f}  output {vocab.decode(clean.output)!r}")
print(f"attacked tau {attacked.tau:.2f}  output {vocab.decode(attacked.output)!r}")
print(f"accepted-length reduction: {(clean.tau - attacked.tau) / clean.tau * 100:.0f}%")
