"""Command-line orchestrator: train, decode, attack, report.

Experiments are driven by an INI-style config file (flat key = value pairs in
sections); every key can be overridden by a command-line flag, and the flag
wins.  A single master seed derives all stage seeds deterministically, so a
full pipeline run is byte-reproducible, serially or with --jobs parallelism.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from . import analysis, attack, specdec, tinylm
from .errors import ConfigError, InputError, InternalError, SpecLabError

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INTERNAL = 2


def derive_seed(master_seed: int, stage: str) -> int:
    """Stage seed = first 8 bytes of sha256("<master>:<stage>"), little-endian."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ExperimentConfig:
    corpus_path: Path
    prompts_path: Path
    out_dir: Path
    target_model: tinylm.ModelConfig
    drafter_model: tinylm.ModelConfig
    train: tinylm.TrainConfig
    distill: tinylm.TrainConfig
    decode: specdec.DecodeConfig
    attack: attack.AttackConfig
    master_seed: int
    jobs: int = 1


def _get(section, key, cast, default):
    if section is None or key not in section:
        return default
    raw = section[key]
    try:
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    ini = configparser.ConfigParser()
    ini.read(path)
    base = path.parent

    def section(name):
        return ini[name] if ini.has_section(name) else None

    paths = section("paths")
    target_sec, drafter_sec = section("model.target"), section("model.drafter")
    target_model = tinylm.ModelConfig(
        context_len=_get(target_sec, "context_len", int, 8),
        embed_dim=_get(target_sec, "embed_dim", int, 16),
        hidden_dim=_get(target_sec, "hidden_dim", int, 128),
    )
    drafter_model = tinylm.ModelConfig(
        context_len=_get(drafter_sec, "context_len", int, target_model.context_len),
        embed_dim=_get(drafter_sec, "embed_dim", int, 8),
        hidden_dim=_get(drafter_sec, "hidden_dim", int, 16),
    )
    train_sec, distill_sec = section("train"), section("distill")
    train_cfg = tinylm.TrainConfig(
        epochs=_get(train_sec, "epochs", int, 40),
        batch_size=_get(train_sec, "batch_size", int, 64),
        learning_rate=_get(train_sec, "learning_rate", float, 0.5),
    )
    distill_cfg = tinylm.TrainConfig(
        epochs=_get(distill_sec, "epochs", int, 40),
        batch_size=_get(distill_sec, "batch_size", int, 64),
        learning_rate=_get(distill_sec, "learning_rate", float, 0.5),
    )
    decode_sec = section("decode")
    decode_cfg = specdec.DecodeConfig(
        draft_budget=_get(decode_sec, "k", int, 4),
        max_tokens=_get(decode_sec, "max_tokens", int, 32),
        mode=_get(decode_sec, "mode", str, "greedy"),
        drafter_cost_ratio=_get(decode_sec, "drafter_cost_ratio", float, 0.1),
    )
    attack_sec = section("attack")
    attack_cfg = attack.AttackConfig(
        suffix_len=_get(attack_sec, "suffix_len", int, 8),
        iterations=_get(attack_sec, "iterations", int, 50),
        top_k=_get(attack_sec, "top_k", int, 8),
        batch=_get(attack_sec, "batch", int, 64),
        kl_bound=_get(attack_sec, "kl_bound", float, 0.5),
        rej_weight=_get(attack_sec, "rej_weight", float, 2.0),
        damping=_get(attack_sec, "damping", float, 1e-8),
        sem_positions=_get(attack_sec, "sem_positions", int, 12),
        attack_cycles=_get(attack_sec, "attack_cycles", int, 4),
        draft_budget=decode_cfg.draft_budget,
    )
    run_sec = section("run")
    return ExperimentConfig(
        corpus_path=base / _get(paths, "corpus", str, "corpus.txt"),
        prompts_path=base / _get(paths, "prompts", str, "prompts.txt"),
        out_dir=base / _get(paths, "out_dir", str, "runs"),
        target_model=target_model,
        drafter_model=drafter_model,
        train=train_cfg,
        distill=distill_cfg,
        decode=decode_cfg,
        attack=attack_cfg,
        master_seed=_get(run_sec, "master_seed", int, 0),
        jobs=_get(run_sec, "jobs", int, 1),
    )


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _read_corpus(cfg: ExperimentConfig) -> tuple[tinylm.Vocabulary, tuple[int, ...], str]:
    if not cfg.corpus_path.is_file():
        raise InputError(f"corpus file not found: {cfg.corpus_path}")
    text = cfg.corpus_path.read_text()
    if not text:
        raise InputError(f"corpus file is empty: {cfg.corpus_path}")
    vocab = tinylm.Vocabulary.from_text(text)
    return vocab, vocab.encode(text), text


def _read_prompts(cfg: ExperimentConfig, vocab: tinylm.Vocabulary) -> list[tuple[int, tuple[int, ...]]]:
    if not cfg.prompts_path.is_file():
        raise InputError(f"prompts file not found: {cfg.prompts_path}")
    prompts = []
    for pid, line in enumerate(cfg.prompts_path.read_text().splitlines()):
        if not line:
            raise InputError(f"prompt {pid} is empty")
        prompts.append((pid, vocab.encode(line)))
    if not prompts:
        raise InputError(f"prompts file has no lines: {cfg.prompts_path}")
    return prompts


def _load_models(cfg: ExperimentConfig) -> tuple[tinylm.Vocabulary, tinylm.ModelParams, tinylm.ModelParams]:
    vocab_path = cfg.out_dir / "vocab.json"
    if not vocab_path.is_file():
        raise InputError(f"vocabulary file not found (run `train` first): {vocab_path}")
    vocab = tinylm.Vocabulary(tuple(json.loads(vocab_path.read_text())["symbols"]))
    target = tinylm.load_checkpoint(cfg.out_dir / "target.ckpt")
    drafter = tinylm.load_checkpoint(cfg.out_dir / "drafter.ckpt")
    for name, params in (("target", target), ("drafter", drafter)):
        if params.vocab_size != vocab.size:
            raise InputError(f"{name} checkpoint vocabulary size {params.vocab_size} != vocab {vocab.size}")
    return vocab, target, drafter


def _parallel_map(fn, items, jobs: int):
    """Order-preserving map; identical results for serial and parallel runs."""
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig) -> int:
    vocab, corpus_ids, _ = _read_corpus(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)  # inputs validated; safe to create
    target_losses: list[float] = []
    distill_kls: list[float] = []
    target = tinylm.train_target(
        corpus_ids,
        vocab.size,
        cfg.target_model,
        cfg.train,
        derive_seed(cfg.master_seed, "train-target"),
        on_epoch=lambda _e, loss: target_losses.append(loss),
    )
    drafter = tinylm.distill_drafter(
        target,
        corpus_ids,
        cfg.drafter_model,
        cfg.distill,
        derive_seed(cfg.master_seed, "distill-drafter"),
        on_epoch=lambda _e, kl: distill_kls.append(kl),
    )
    tinylm.save_checkpoint(target, cfg.out_dir / "target.ckpt")
    tinylm.save_checkpoint(drafter, cfg.out_dir / "drafter.ckpt")
    _write_atomic(cfg.out_dir / "vocab.json", _dump_json({"symbols": list(vocab.symbols)}))
    log = {
        "target_loss_per_epoch": target_losses,
        "distill_kl_per_epoch": distill_kls,
        "final_distill_kl": tinylm.distillation_kl(target, drafter, corpus_ids),
        "master_seed": cfg.master_seed,
    }
    _write_atomic(cfg.out_dir / "train_log.json", _dump_json(log))
    print(f"wrote checkpoints and training log to {cfg.out_dir}")
    return EXIT_OK


def _load_suffixes(path: Path) -> dict[int, tuple[int, ...]]:
    if not path.is_file():
        raise InputError(f"suffix file not found: {path}")
    suffixes: dict[int, tuple[int, ...]] = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "error" in rec:
            continue
        suffixes[int(rec["prompt_id"])] = tuple(int(t) for t in rec["suffix"])
    return suffixes


def cmd_decode(cfg: ExperimentConfig, suffix_file: str | None, trace_out: str | None) -> int:
    vocab, target, drafter = _load_models(cfg)
    prompts = _read_prompts(cfg, vocab)
    suffixes = _load_suffixes(Path(suffix_file)) if suffix_file else {}

    def run(item):
        pid, prompt = item
        suffix = suffixes.get(pid, ())
        decode_cfg = replace(cfg.decode, seed=derive_seed(cfg.master_seed, f"decode:{pid}"))
        trace = specdec.speculative_decode(target, drafter, prompt + suffix, decode_cfg)
        record = specdec.trace_to_dict(trace)
        record["prompt_id"] = pid
        record["suffix"] = list(suffix)
        return record

    records = _parallel_map(run, prompts, cfg.jobs)
    name = trace_out or ("traces_attacked.jsonl" if suffix_file else "traces_clean.jsonl")
    _write_atomic(cfg.out_dir / name, "".join(_dump_json(r) + "\n" for r in records))
    print(f"wrote {len(records)} trace records to {cfg.out_dir / name}")
    return EXIT_OK


def cmd_attack(cfg: ExperimentConfig, variant: str) -> int:
    vocab, target, drafter = _load_models(cfg)
    _, corpus_ids, _ = _read_corpus(cfg)
    prompts = _read_prompts(cfg, vocab)
    counts = [0] * vocab.size
    for t in corpus_ids:
        counts[t] += 1
    neutral = counts.index(max(counts))
    base_attack = cfg.attack
    if base_attack.init_token is None:
        base_attack = replace(base_attack, init_token=neutral)

    def run(item):
        pid, prompt = item
        attack_cfg = replace(base_attack, seed=derive_seed(cfg.master_seed, f"attack:{pid}"))
        try:
            state = attack.ablation_run(target, drafter, prompt, attack_cfg, variant)
        except ConfigError as exc:
            return pid, None, str(exc), attack_cfg
        return pid, state, None, attack_cfg

    results = _parallel_map(run, prompts, cfg.jobs)
    summary_lines = []
    for pid, state, error, attack_cfg in results:
        if state is None:
            summary_lines.append(_dump_json({"prompt_id": pid, "error": error}) + "\n")
            continue
        if variant in ("full", "naive-joint"):
            # Re-verify feasibility from scratch before persisting anything.
            anchors = attack.build_semantic_anchors(target, prompts[pid][1], attack_cfg.sem_positions)
            sem = attack.semantic_loss(target, anchors, prompts[pid][1] + state.delta)
            if sem > attack_cfg.kl_bound:
                raise InternalError(f"prompt {pid}: emitted suffix violates the KL bound")
        record = attack.attack_record(state, attack_cfg, variant=variant, prompt_id=pid, vocab=vocab)
        _write_atomic(cfg.out_dir / "attack" / f"prompt_{pid:04d}.json", json.dumps(record, sort_keys=True, indent=2) + "\n")
        summary_lines.append(
            _dump_json(
                {
                    "prompt_id": pid,
                    "suffix": list(state.delta),
                    "suffix_text": vocab.decode(state.delta),
                    "loss_rej": state.loss_rej,
                    "loss_sem": state.loss_sem,
                    "variant": variant,
                }
            )
            + "\n"
        )
    _write_atomic(cfg.out_dir / "suffixes.jsonl", "".join(summary_lines))
    print(f"wrote suffix artifacts for {len(results)} prompts to {cfg.out_dir}")
    return EXIT_OK


def _load_traces(path: Path) -> dict[int, specdec.DecodeTrace]:
    if not path.is_file():
        raise InputError(f"trace file not found: {path}")
    traces = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        traces[int(rec["prompt_id"])] = specdec.trace_from_dict(rec)
    if not traces:
        raise InputError(f"trace file has no records: {path}")
    return traces


def cmd_report(cfg: ExperimentConfig, clean_path: str, attacked_path: str, suffixes_path: str | None) -> int:
    _, target, _ = _load_models(cfg)
    clean = _load_traces(Path(clean_path))
    attacked = _load_traces(Path(attacked_path))
    final_sem = None
    if suffixes_path:
        final_sem = {}
        for line in Path(suffixes_path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "loss_sem" in rec:
                final_sem[int(rec["prompt_id"])] = float(rec["loss_sem"])
    report = analysis.build_report(clean, attacked, target, final_sem, cfg.decode.drafter_cost_ratio)
    _write_atomic(cfg.out_dir / "report.csv", analysis.report_to_csv(report))
    _write_atomic(
        cfg.out_dir / "report_summary.json",
        _dump_json({"aggregate": report.aggregate, "excluded": list(report.excluded), "metadata": report.metadata}),
    )
    for label, traces in (("clean", clean), ("attacked", attacked)):
        stats = analysis.accepted_length_stats([traces[p] for p in sorted(traces)])
        _write_atomic(cfg.out_dir / f"histogram_{label}.csv", analysis.histogram_csv(stats))
        _write_atomic(cfg.out_dir / f"survival_{label}.csv", analysis.survival_csv(stats))
    print(f"wrote report files to {cfg.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=Path(args.out_dir))
    if getattr(args, "jobs", None) is not None:
        cfg = replace(cfg, jobs=args.jobs)
    decode_cfg = cfg.decode
    if getattr(args, "k", None) is not None:
        decode_cfg = replace(decode_cfg, draft_budget=args.k)
    if getattr(args, "mode", None) is not None:
        decode_cfg = replace(decode_cfg, mode=args.mode)
    if getattr(args, "max_tokens", None) is not None:
        decode_cfg = replace(decode_cfg, max_tokens=args.max_tokens)
    if decode_cfg is not cfg.decode:
        cfg = replace(cfg, decode=decode_cfg, attack=replace(cfg.attack, draft_budget=decode_cfg.draft_budget))
    attack_cfg = cfg.attack
    if getattr(args, "epsilon", None) is not None:
        attack_cfg = replace(attack_cfg, kl_bound=args.epsilon)
    if getattr(args, "rej_weight", None) is not None:
        attack_cfg = replace(attack_cfg, rej_weight=args.rej_weight)
    if getattr(args, "iterations", None) is not None:
        attack_cfg = replace(attack_cfg, iterations=args.iterations)
    if attack_cfg is not cfg.attack:
        cfg = replace(cfg, attack=attack_cfg)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config file (INI sections)")
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--out-dir", default=None, help="override the output directory")

    parser = argparse.ArgumentParser(prog="speclab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train the target and distill the drafter")

    p_decode = sub.add_parser("decode", parents=[common], help="run speculative decoding over the prompt file")
    p_decode.add_argument("--k", type=int, default=None, help="draft budget per cycle")
    p_decode.add_argument("--mode", choices=specdec.MODES, default=None)
    p_decode.add_argument("--max-tokens", type=int, default=None)
    p_decode.add_argument("--suffix-file", default=None, help="suffixes.jsonl to append per prompt")
    p_decode.add_argument("--trace-out", default=None, help="trace file name inside the output directory")
    p_decode.add_argument("--jobs", type=int, default=None, help="parallel prompt workers")

    p_attack = sub.add_parser("attack", parents=[common], help="optimize an adversarial suffix per prompt")
    p_attack.add_argument("--variant", choices=attack.VARIANTS, default="full")
    p_attack.add_argument("--epsilon", type=float, default=None, help="KL bound for the veto")
    p_attack.add_argument("--lambda", dest="rej_weight", type=float, default=None, help="rejection weight")
    p_attack.add_argument("--iterations", type=int, default=None)
    p_attack.add_argument("--jobs", type=int, default=None, help="parallel prompt workers")

    p_report = sub.add_parser("report", parents=[common], help="build the clean-vs-attacked collapse report")
    p_report.add_argument("--clean", required=True, help="clean trace file (JSONL)")
    p_report.add_argument("--attacked", required=True, help="attacked trace file (JSONL)")
    p_report.add_argument("--suffixes", default=None, help="suffixes.jsonl for final semantic losses")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "decode":
            return cmd_decode(cfg, args.suffix_file, args.trace_out)
        if args.command == "attack":
            return cmd_attack(cfg, args.variant)
        if args.command == "report":
            return cmd_report(cfg, args.clean, args.attacked, args.suffixes)
        raise ConfigError(f"unknown command {args.command!r}")
    except InternalError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SpecLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
