#!/usr/bin/env python3
"""Train the tiny target model and distill a drafter from it.

The corpus is a few thousand characters of template-grammar sentences, so
the conditional next-character distributions have genuine entropy and both
models stay soft.  The target gets hidden width 128; the drafter is the same
architecture squeezed to width 16 and trained on the target's full output
distributions, which leaves a visible approximation gap for speculative
decoding to expose.
"""

from pathlib import Path

import numpy as np

from speclab import (
    ModelConfig,
    TrainConfig,
    Vocabulary,
    autoregressive_decode,
    distill_drafter,
    distillation_kl,
    forward,
    save_checkpoint,
    train_target,
)

DATA = Path(__file__).parent / "data"

text = (DATA / "corpus.txt").read_text()
vocab = Vocabulary.from_text(text)
corpus = vocab.encode(text)
print(f"corpus: {len(corpus)} characters, vocabulary of {vocab.size} symbols")
print(f"symbols: {''.join(vocab.symbols)!r}")

# --- target model -----------------------------------------------------------
target_losses = []
target = train_target(
    corpus,
    vocab.size,
    ModelConfig(context_len=12, embed_dim=16, hidden_dim=128),
    TrainConfig(epochs=30, batch_size=64, learning_rate=0.5),
    seed=1,
    on_epoch=lambda e, loss: target_losses.append(loss),
)
print(f"\ntarget cross-entropy: {target_losses[0]:.3f} -> {target_losses[-1]:.3f} nats "
      f"(uniform baseline {np.log(vocab.size):.3f})")

prompt = vocab.encode("the cat sat ")
continuation = autoregressive_decode(target, prompt, 30, "greedy")
print(f"greedy continuation of 'the cat sat ': {vocab.decode(continuation)!r}")

# the corpus has real branching: look at the distribution after "the "
dist = forward(target, vocab.encode("the "))
top = np.argsort(-dist)[:5]
print("target P(next | 'the '):", {vocab.symbols[i]: round(float(dist[i]), 3) for i in top})

# --- drafter ----------------------------------------------------------------
kls = []
drafter = distill_drafter(
    target,
    corpus,
    ModelConfig(context_len=12, embed_dim=8, hidden_dim=16),
    TrainConfig(epochs=30, batch_size=64, learning_rate=0.5),
    seed=2,
    on_epoch=lambda e, kl: kls.append(kl),
)
print(f"\ndistillation KL(target || drafter): {kls[0]:.3f} -> {kls[-1]:.4f} nats")
print(f"final corpus-wide KL: {distillation_kl(target, drafter, corpus):.4f}")

ddist = forward(drafter, vocab.encode("the "))
print("drafter P(next | 'the '):", {vocab.symbols[i]: round(float(ddist[i]), 3) for i in top})

out = DATA / "runs"
out.mkdir(exist_ok=True)
save_checkpoint(target, out / "target.ckpt")
save_checkpoint(drafter, out / "drafter.ckpt")
print(f"\ncheckpoints written to {out}/")
