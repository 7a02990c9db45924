"""Session fixtures: the toy corpus, trained target, distilled drafters,
and the shared (expensive) attack runs reused by module and acceptance tests."""

import pytest

from speclab import tinylm

import helpers


@pytest.fixture(scope="session")
def corpus_text():
    return helpers.make_corpus()


@pytest.fixture(scope="session")
def vocab(corpus_text):
    return tinylm.Vocabulary.from_text(corpus_text)


@pytest.fixture(scope="session")
def corpus_ids(vocab, corpus_text):
    return vocab.encode(corpus_text)


@pytest.fixture(scope="session")
def space_id(vocab):
    return vocab.encode(" ")[0]


@pytest.fixture(scope="session")
def target(corpus_ids, vocab):
    return tinylm.train_target(corpus_ids, vocab.size, helpers.TARGET_MODEL, helpers.TRAIN, seed=1)


@pytest.fixture(scope="session")
def drafter(target, corpus_ids):
    return tinylm.distill_drafter(target, corpus_ids, helpers.DRAFTER_MODEL, helpers.TRAIN, seed=2)


@pytest.fixture(scope="session")
def drafter_b(target, corpus_ids):
    """Independently distilled second drafter (different seed and capacity)."""
    return tinylm.distill_drafter(target, corpus_ids, helpers.DRAFTER_B_MODEL, helpers.TRAIN, seed=77)


@pytest.fixture(scope="session")
def prompts(vocab):
    return [vocab.encode(p) for p in helpers.TOY_PROMPTS]


@pytest.fixture(scope="session")
def full_runs(target, drafter, prompts, space_id):
    return helpers.run_attack_suite(target, drafter, prompts, space_id, "full")


@pytest.fixture(scope="session")
def rej_only_runs(target, drafter, prompts, space_id):
    return helpers.run_attack_suite(target, drafter, prompts, space_id, "rej-only")


@pytest.fixture(scope="session")
def sem_only_runs(target, drafter, prompts, space_id):
    return helpers.run_attack_suite(target, drafter, prompts, space_id, "sem-only")


@pytest.fixture(scope="session")
def naive_joint_runs(target, drafter, prompts, space_id):
    return helpers.run_attack_suite(target, drafter, prompts, space_id, "naive-joint")
