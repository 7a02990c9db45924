"""End-to-end CLI tests: config handling, the four subcommands, artifact
formats, exit codes, and reproducibility."""

import json
from pathlib import Path

from speclab import cli

import helpers

CONFIG_TEMPLATE = """
[paths]
corpus = corpus.txt
prompts = prompts.txt
out_dir = {out_dir}

[model.target]
context_len = 10
embed_dim = 12
hidden_dim = 48

[model.drafter]
embed_dim = 6
hidden_dim = 12

[train]
epochs = 10
batch_size = 64
learning_rate = 0.5

[distill]
epochs = 10
batch_size = 64
learning_rate = 0.5

[decode]
k = 4
max_tokens = 16
mode = greedy
drafter_cost_ratio = 0.1

[attack]
suffix_len = 6
iterations = 2
top_k = 6
batch = 8
kl_bound = 0.5
sem_positions = 10
attack_cycles = 3

[run]
master_seed = 7
"""


def write_experiment(tmp_path: Path, out_dir: str = "runs") -> Path:
    tmp_path.mkdir(parents=True, exist_ok=True)
    (tmp_path / "corpus.txt").write_text(helpers.make_corpus(sentences=150))
    (tmp_path / "prompts.txt").write_text("the cat sat \nthe dog ran \na bird sang \n")
    config = tmp_path / "experiment.ini"
    config.write_text(CONFIG_TEMPLATE.format(out_dir=out_dir))
    return config


def run_pipeline(config: Path, jobs: list[str] | None = None) -> Path:
    extra = jobs or []
    assert cli.main(["train", "--config", str(config)]) == 0
    assert cli.main(["decode", "--config", str(config)] + extra) == 0
    assert cli.main(["attack", "--config", str(config)] + extra) == 0
    out_dir = cli.load_config(config).out_dir
    assert (
        cli.main(
            ["decode", "--config", str(config), "--suffix-file", str(out_dir / "suffixes.jsonl")] + extra
        )
        == 0
    )
    assert (
        cli.main(
            [
                "report",
                "--config",
                str(config),
                "--clean",
                str(out_dir / "traces_clean.jsonl"),
                "--attacked",
                str(out_dir / "traces_attacked.jsonl"),
                "--suffixes",
                str(out_dir / "suffixes.jsonl"),
            ]
        )
        == 0
    )
    return out_dir


def artifact_bytes(out_dir: Path) -> dict[str, bytes]:
    return {str(p.relative_to(out_dir)): p.read_bytes() for p in sorted(out_dir.rglob("*")) if p.is_file()}


class TestConfig:
    def test_missing_config_file(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "nope.ini")]) == 1

    def test_missing_corpus_writes_nothing(self, tmp_path):
        config = write_experiment(tmp_path)
        (tmp_path / "corpus.txt").unlink()
        assert cli.main(["train", "--config", str(config)]) == 1
        assert not (tmp_path / "runs").exists()

    def test_decode_before_train_fails_cleanly(self, tmp_path):
        config = write_experiment(tmp_path)
        assert cli.main(["decode", "--config", str(config)]) == 1

    def test_seed_derivation_is_stable(self):
        assert cli.derive_seed(7, "train-target") == cli.derive_seed(7, "train-target")
        assert cli.derive_seed(7, "train-target") != cli.derive_seed(8, "train-target")
        assert cli.derive_seed(7, "a") != cli.derive_seed(7, "b")


class TestPipeline:
    def test_full_pipeline_artifacts(self, tmp_path):
        config = write_experiment(tmp_path)
        out_dir = run_pipeline(config)
        for name in (
            "target.ckpt",
            "drafter.ckpt",
            "vocab.json",
            "train_log.json",
            "traces_clean.jsonl",
            "traces_attacked.jsonl",
            "suffixes.jsonl",
            "report.csv",
            "report_summary.json",
            "histogram_clean.csv",
            "survival_attacked.csv",
        ):
            assert (out_dir / name).is_file(), name
        log = json.loads((out_dir / "train_log.json").read_text())
        assert log["target_loss_per_epoch"][-1] <= log["target_loss_per_epoch"][0]
        report = (out_dir / "report.csv").read_text().strip().split("\n")
        assert len(report) == 1 + 3 + 1  # header + one row per prompt + aggregate

    def test_trace_tau_recomputable_by_independent_reader(self, tmp_path):
        config = write_experiment(tmp_path)
        assert cli.main(["train", "--config", str(config)]) == 0
        assert cli.main(["decode", "--config", str(config)]) == 0
        out_dir = cli.load_config(config).out_dir
        for line in (out_dir / "traces_clean.jsonl").read_text().splitlines():
            rec = json.loads(line)
            committed = sum(c["committed"] for c in rec["cycles"])
            assert len(rec["output"]) == min(committed, 16)
            assert rec["tau"] == len(rec["output"]) / rec["target_forward_passes"]

    def test_no_suffix_equals_empty_suffix(self, tmp_path):
        config = write_experiment(tmp_path)
        assert cli.main(["train", "--config", str(config)]) == 0
        assert cli.main(["decode", "--config", str(config)]) == 0
        out_dir = cli.load_config(config).out_dir
        empty = out_dir / "empty_suffixes.jsonl"
        empty.write_text("".join(json.dumps({"prompt_id": i, "suffix": []}) + "\n" for i in range(3)))
        assert (
            cli.main(
                ["decode", "--config", str(config), "--suffix-file", str(empty), "--trace-out", "traces_empty.jsonl"]
            )
            == 0
        )
        assert (out_dir / "traces_empty.jsonl").read_bytes() == (out_dir / "traces_clean.jsonl").read_bytes()

    def test_zero_iteration_attack_emits_initialization(self, tmp_path):
        config = write_experiment(tmp_path)
        assert cli.main(["train", "--config", str(config)]) == 0
        assert cli.main(["attack", "--config", str(config), "--iterations", "0"]) == 0
        out_dir = cli.load_config(config).out_dir
        vocab = json.loads((out_dir / "vocab.json").read_text())["symbols"]
        space = vocab.index(" ")
        for line in (out_dir / "suffixes.jsonl").read_text().splitlines():
            rec = json.loads(line)
            assert rec["suffix"] == [space] * 6
            assert rec["loss_sem"] <= 0.5

    def test_attack_variant_flag(self, tmp_path):
        config = write_experiment(tmp_path)
        assert cli.main(["train", "--config", str(config)]) == 0
        assert cli.main(["attack", "--config", str(config), "--variant", "rej-only", "--iterations", "1"]) == 0
        out_dir = cli.load_config(config).out_dir
        rec = json.loads((out_dir / "suffixes.jsonl").read_text().splitlines()[0])
        assert rec["variant"] == "rej-only"

    def test_emitted_suffixes_respect_kl_bound(self, tmp_path):
        config = write_experiment(tmp_path)
        assert cli.main(["train", "--config", str(config)]) == 0
        assert cli.main(["attack", "--config", str(config)]) == 0
        out_dir = cli.load_config(config).out_dir
        for line in (out_dir / "suffixes.jsonl").read_text().splitlines():
            assert json.loads(line)["loss_sem"] <= 0.5


class TestReproducibility:
    def test_pipeline_byte_identical_across_runs_and_parallelism(self, tmp_path):
        """The same config and master seed produce byte-identical artifacts,
        serially and with --jobs 2."""
        cfg_a = write_experiment(tmp_path / "a")
        cfg_b = write_experiment(tmp_path / "b")
        out_a = run_pipeline(cfg_a)
        out_b = run_pipeline(cfg_b)
        bytes_a = artifact_bytes(out_a)
        bytes_b = artifact_bytes(out_b)
        assert set(bytes_a) == set(bytes_b)
        for name in bytes_a:
            assert bytes_a[name] == bytes_b[name], name
        cfg_c = write_experiment(tmp_path / "c")
        out_c = run_pipeline(cfg_c, jobs=["--jobs", "2"])
        bytes_c = artifact_bytes(out_c)
        assert bytes_c == bytes_a

    def test_seed_override_changes_artifacts(self, tmp_path):
        config = write_experiment(tmp_path)
        assert cli.main(["train", "--config", str(config)]) == 0
        first = (cli.load_config(config).out_dir / "target.ckpt").read_bytes()
        assert cli.main(["train", "--config", str(config), "--seed", "8", "--out-dir", str(tmp_path / "other")]) == 0
        second = (tmp_path / "other" / "target.ckpt").read_bytes()
        assert first != second
