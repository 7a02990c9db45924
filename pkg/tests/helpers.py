"""Shared test utilities: toy corpus, tiny random models, attack harness."""

import numpy as np

from speclab import attack, specdec, tinylm

SUBJECTS = ["the cat", "the dog", "the fox", "a bird", "a fish", "the man", "the kid"]
VERBS = ["sat", "ran", "hid", "sang", "swam", "slept", "played"]
PLACES = ["on the mat", "in the park", "in the tree", "by the pond", "on the hill", "in the grass"]

# Prompts end mid-sentence so the clean continuation is sharply structured
# while still leaving genuine branching entropy at the first positions.
TOY_PROMPTS = [
    "the cat sat ",
    "the dog ran ",
    "a bird sang ",
    "the fox hid ",
    "a fish swam ",
    "the man slept ",
    "the kid played ",
    "the cat ran ",
    "the dog hid ",
    "a bird swam ",
]

TARGET_MODEL = tinylm.ModelConfig(context_len=12, embed_dim=16, hidden_dim=128)
DRAFTER_MODEL = tinylm.ModelConfig(context_len=12, embed_dim=8, hidden_dim=16)
DRAFTER_B_MODEL = tinylm.ModelConfig(context_len=12, embed_dim=12, hidden_dim=24)
TRAIN = tinylm.TrainConfig(epochs=30, batch_size=64, learning_rate=0.5)

GREEDY_DECODE = specdec.DecodeConfig(draft_budget=4, max_tokens=24, mode="greedy", seed=0)


def make_corpus(seed: int = 0, sentences: int = 260) -> str:
    """Template-grammar corpus with real branching entropy, so the trained
    target stays soft and anchor KLs remain moderate."""
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(sentences):
        parts.append(
            SUBJECTS[rng.integers(len(SUBJECTS))]
            + " "
            + VERBS[rng.integers(len(VERBS))]
            + " "
            + PLACES[rng.integers(len(PLACES))]
            + ". "
        )
    return "".join(parts)


def small_params(v: int, c: int, d: int, h: int, seed: int, scale: float = 0.6) -> tinylm.ModelParams:
    """Random small model; larger weight scale than training init so the
    distributions are meaningfully non-uniform."""
    rng = np.random.default_rng(seed)
    return tinylm.ModelParams(
        vocab_size=v,
        context_len=c,
        embedding=rng.normal(0, scale, (v + 1, d)),
        w1=rng.normal(0, scale, (c * d, h)),
        b1=rng.normal(0, scale, h),
        w2=rng.normal(0, scale, (h, v)),
        b2=rng.normal(0, scale, v),
    )


def constant_model(dist, context_len: int = 2) -> tinylm.ModelParams:
    """Model whose next-token distribution equals `dist` for every context."""
    dist = np.asarray(dist, dtype=np.float64)
    v = dist.size
    d, h = 2, 2
    return tinylm.ModelParams(
        vocab_size=v,
        context_len=context_len,
        embedding=np.zeros((v + 1, d)),
        w1=np.zeros((context_len * d, h)),
        b1=np.zeros(h),
        w2=np.zeros((h, v)),
        b2=np.log(np.maximum(dist, 1e-300)),
    )


def base_attack_config(space_id: int, seed: int = 0, **overrides) -> attack.AttackConfig:
    """The frozen toy attack configuration used across the suite."""
    kwargs = dict(
        suffix_len=8,
        iterations=50,
        top_k=8,
        batch=64,
        kl_bound=0.5,
        rej_weight=2.0,
        damping=1e-8,
        sem_positions=12,
        attack_cycles=4,
        draft_budget=4,
        seed=seed,
        init_token=space_id,
    )
    kwargs.update(overrides)
    return attack.AttackConfig(**kwargs)


def run_attack_suite(target, drafter, prompts, space_id, variant, decode_cfg=GREEDY_DECODE, **overrides):
    """Attack every prompt with per-prompt seeds; returns a list of
    (clean_trace, attacked_trace, suffix_state) triples."""
    rows = []
    for i, prompt in enumerate(prompts):
        cfg = base_attack_config(space_id, seed=1000 + i, **overrides)
        state = attack.ablation_run(target, drafter, prompt, cfg, variant)
        clean = specdec.speculative_decode(target, drafter, prompt, decode_cfg)
        attacked = specdec.speculative_decode(target, drafter, tuple(prompt) + state.delta, decode_cfg)
        rows.append((clean, attacked, state))
    return rows


def fd_gradient(params, base, span, terms, step=1e-3):
    """Central finite differences of `loss_value` over the one-hot relaxation."""
    m = span[1] - span[0]
    v = params.vocab_size
    z0 = tinylm.one_hot(base[span[0] : span[1]], v)
    grad = np.zeros((m, v))
    for j in range(m):
        for tok in range(v):
            zp = z0.copy()
            zp[j, tok] += step
            zm = z0.copy()
            zm[j, tok] -= step
            grad[j, tok] = (
                tinylm.loss_value(params, base, span, terms, zp)
                - tinylm.loss_value(params, base, span, terms, zm)
            ) / (2 * step)
    return grad
