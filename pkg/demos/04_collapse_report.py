#!/usr/bin/env python3
"""Clean-vs-attacked evaluation over the whole prompt set, plus ablations
and cross-drafter transfer, ending in the CSV report artifacts.

This is the library-level equivalent of the CLI pipeline
(train -> attack -> decode -> report); see README for the CLI version.
"""

from pathlib import Path

import numpy as np

from speclab import (
    AttackConfig,
    DecodeConfig,
    ModelConfig,
    TrainConfig,
    Vocabulary,
    ablation_run,
    accepted_length_stats,
    build_report,
    distill_drafter,
    histogram_csv,
    report_to_csv,
    speculative_decode,
    survival_csv,
    train_target,
    transfer_evaluate,
)

DATA = Path(__file__).parent / "data"
text = (DATA / "corpus.txt").read_text()
vocab = Vocabulary.from_text(text)
corpus = vocab.encode(text)
target = train_target(corpus, vocab.size, ModelConfig(12, 16, 128), TrainConfig(30, 64, 0.5), seed=1)
drafter = distill_drafter(target, corpus, ModelConfig(12, 8, 16), TrainConfig(30, 64, 0.5), seed=2)
drafter_b = distill_drafter(target, corpus, ModelConfig(12, 12, 24), TrainConfig(30, 64, 0.5), seed=77)

prompts = [vocab.encode(line) for line in (DATA / "prompts.txt").read_text().splitlines()]
decode = DecodeConfig(draft_budget=4, max_tokens=24, mode="greedy", seed=0)
space = vocab.encode(" ")[0]


def attack_all(variant):
    states = []
    for i, prompt in enumerate(prompts):
        cfg = AttackConfig(
            suffix_len=8, iterations=50, top_k=8, batch=64, kl_bound=0.5, rej_weight=2.0,
            damping=1e-8, sem_positions=12, attack_cycles=4, draft_budget=4,
            seed=1000 + i, init_token=space,
        )
        states.append(ablation_run(target, drafter, prompt, cfg, variant))
    return states


print("optimizing suffixes (full variant, 10 prompts)...")
full_states = attack_all("full")
clean = {i: speculative_decode(target, drafter, p, decode) for i, p in enumerate(prompts)}
attacked = {
    i: speculative_decode(target, drafter, tuple(p) + full_states[i].delta, decode)
    for i, p in enumerate(prompts)
}

report = build_report(clean, attacked, target, {i: s.loss_sem for i, s in enumerate(full_states)})
agg = report.aggregate
print(f"\nmean tau:      {agg['mean_clean_tau']:.2f} -> {agg['mean_attacked_tau']:.2f} "
      f"({agg['tau_reduction_rel'] * 100:.0f}% reduction)")
print(f"mean speedup:  {agg['mean_clean_speedup']:.2f} -> {agg['mean_attacked_speedup']:.2f}")
print(f"mean PPL:      {agg['mean_clean_ppl']:.2f} -> {agg['mean_attacked_ppl']:.2f}")
print(f"mean Rep-4:    {agg['mean_clean_rep4']:.3f} -> {agg['mean_attacked_rep4']:.3f}")

out = DATA / "runs"
out.mkdir(exist_ok=True)
(out / "report.csv").write_text(report_to_csv(report))
for label, traces in (("clean", clean), ("attacked", attacked)):
    stats = accepted_length_stats(list(traces.values()))
    (out / f"histogram_{label}.csv").write_text(histogram_csv(stats))
    (out / f"survival_{label}.csv").write_text(survival_csv(stats))
print(f"\nreport and plot-data CSVs written to {out}/")

# --- ablations ----------------------------------------------------------------
print("\nablations (mean attacked tau / mean final semantic loss):")
for variant in ("rej-only", "sem-only", "naive-joint"):
    states = attack_all(variant)
    taus = [speculative_decode(target, drafter, tuple(p) + s.delta, decode).tau
            for p, s in zip(prompts, states)]
    sems = [s.loss_sem for s in states]
    print(f"  {variant:12s} tau {np.mean(taus):.2f}  L_sem {np.mean(sems):.3f} "
          f"(bound violated on {sum(s > 0.5 for s in sems)}/10 prompts)")
full_taus = [attacked[i].tau for i in range(len(prompts))]
print(f"  {'full':12s} tau {np.mean(full_taus):.2f}  "
      f"L_sem {np.mean([s.loss_sem for s in full_states]):.3f} (bound violated on 0/10 prompts)")

# --- transfer to an independently distilled drafter ----------------------------
wins = 0
drops = []
for prompt, state in zip(prompts, full_states):
    res = transfer_evaluate(state.delta, target, [drafter_b], [prompt], decode)[0]
    wins += res.attacked_tau[0] < res.clean_tau[0]
    drops.append(res.clean_tau[0] - res.attacked_tau[0])
print(f"\ntransfer to drafter B (width 24, different seed): tau reduced on {wins}/10 prompts, "
      f"mean drop {np.mean(drops):.2f}")
