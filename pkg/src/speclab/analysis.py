"""Evaluation artifacts: accepted-length distributions, collapse reports, text metrics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError
from .specdec import DecodeConfig, DecodeTrace, speedup_proxy
from .tinylm import ModelParams, perplexity


@dataclass(frozen=True)
class AcceptedLengthStats:
    """Distribution of committed tokens per cycle, pooled over traces."""

    histogram: dict[int, float]  # committed count -> relative frequency
    survival: dict[int, float]  # k -> P(committed >= k)
    mean: float


def accepted_length_stats(traces: Sequence[DecodeTrace]) -> AcceptedLengthStats:
    counts = [c.committed for t in traces for c in t.cycles]
    if not counts:
        raise InputError("no cycles to analyze")
    arr = np.asarray(counts)
    total = arr.size
    histogram = {a: n / total for a, n in sorted(Counter(counts).items())}
    survival = {k: float((arr >= k).mean()) for k in range(1, arr.max() + 1)}
    return AcceptedLengthStats(histogram=histogram, survival=survival, mean=float(arr.mean()))


def rep4(text: Sequence[int]) -> float:
    """Repeated-4-gram fraction: 1 - distinct 4-grams / 4-gram positions."""
    ids = tuple(int(t) for t in text)
    if len(ids) < 4:
        raise InputError("rep4 needs a sequence of length >= 4")
    grams = [ids[i : i + 4] for i in range(len(ids) - 3)]
    return 1.0 - len(set(grams)) / len(grams)


@dataclass(frozen=True)
class PromptMetrics:
    prompt_id: int
    clean_tau: float
    attacked_tau: float
    clean_speedup: float
    attacked_speedup: float
    clean_ppl: float
    attacked_ppl: float
    clean_rep4: float
    attacked_rep4: float
    final_loss_sem: float


@dataclass(frozen=True)
class CollapseReport:
    rows: tuple[PromptMetrics, ...]
    aggregate: dict[str, float]
    excluded: tuple[int, ...]  # prompt ids dropped by the empty-output rule
    metadata: dict[str, str]


_METRICS = ("tau", "speedup", "ppl", "rep4")


def _speedup(trace: DecodeTrace, cost_ratio: float) -> float:
    return speedup_proxy(trace, DecodeConfig(drafter_cost_ratio=cost_ratio))


def _output_ppl(target: ModelParams, output: Sequence[int]) -> float:
    # Scored on the output alone so the metric reflects text naturalness
    # rather than conditional fit to the (possibly suffixed) prompt.
    return perplexity(target, output) if len(output) >= 2 else float("nan")


def _output_rep4(output: Sequence[int]) -> float:
    return rep4(output) if len(output) >= 4 else 0.0


def build_report(
    clean: Mapping[int, DecodeTrace],
    attacked: Mapping[int, DecodeTrace],
    target: ModelParams,
    final_loss_sem: Mapping[int, float] | None = None,
    cost_ratio: float = 0.1,
) -> CollapseReport:
    """Pair clean and attacked traces by prompt id and compute collapse metrics.

    Prompt pairs where either output is empty are excluded from every
    aggregate (the rule is symmetric and applies only to empty outputs).
    Aggregate reductions are computed from the aggregate means; the mean of
    per-prompt ratios is also emitted.
    """
    if set(clean) != set(attacked):
        odd = sorted(set(clean) ^ set(attacked))
        raise InputError(f"unpaired prompt ids: {odd}")
    if not clean:
        raise InputError("no prompt pairs to report")
    rows: list[PromptMetrics] = []
    excluded: list[int] = []
    for pid in sorted(clean):
        c, a = clean[pid], attacked[pid]
        if not c.output or not a.output:
            excluded.append(pid)
            continue
        sem = float("nan")
        if final_loss_sem is not None and pid in final_loss_sem:
            sem = float(final_loss_sem[pid])
        rows.append(
            PromptMetrics(
                prompt_id=pid,
                clean_tau=c.tau,
                attacked_tau=a.tau,
                clean_speedup=_speedup(c, cost_ratio),
                attacked_speedup=_speedup(a, cost_ratio),
                clean_ppl=_output_ppl(target, c.output),
                attacked_ppl=_output_ppl(target, a.output),
                clean_rep4=_output_rep4(c.output),
                attacked_rep4=_output_rep4(a.output),
                final_loss_sem=sem,
            )
        )
    if not rows:
        raise InputError("every prompt pair was excluded (empty outputs)")
    aggregate: dict[str, float] = {"num_prompts": float(len(rows)), "num_excluded": float(len(excluded))}
    for metric in _METRICS:
        cvals = np.array([getattr(r, f"clean_{metric}") for r in rows])
        avals = np.array([getattr(r, f"attacked_{metric}") for r in rows])
        mc, ma = float(cvals.mean()), float(avals.mean())
        aggregate[f"mean_clean_{metric}"] = mc
        aggregate[f"mean_attacked_{metric}"] = ma
        aggregate[f"{metric}_reduction_abs"] = mc - ma
        if mc != 0.0:
            rel = (mc - ma) / mc
        else:
            rel = 0.0 if ma == 0.0 else float("nan")  # 0/0: no change, report zero
        aggregate[f"{metric}_reduction_rel"] = rel
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = (cvals - avals) / cvals
        aggregate[f"{metric}_reduction_rel_per_prompt_mean"] = float(np.mean(ratios))
    sems = [r.final_loss_sem for r in rows if not np.isnan(r.final_loss_sem)]
    aggregate["mean_final_loss_sem"] = float(np.mean(sems)) if sems else float("nan")
    return CollapseReport(
        rows=tuple(rows),
        aggregate=aggregate,
        excluded=tuple(excluded),
        metadata={"ppl_scorer": "target model, teacher-forced on the output sequence"},
    )


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

REPORT_COLUMNS = (
    "prompt_id",
    "clean_tau",
    "attacked_tau",
    "clean_speedup",
    "attacked_speedup",
    "clean_ppl",
    "attacked_ppl",
    "clean_rep4",
    "attacked_rep4",
    "final_loss_sem",
)


def _fmt(x: float) -> str:
    return repr(float(x))


def report_to_csv(report: CollapseReport) -> str:
    """One row per prompt plus a final `mean` aggregate row."""
    lines = [",".join(REPORT_COLUMNS)]
    for r in report.rows:
        lines.append(
            ",".join(
                [str(r.prompt_id)]
                + [_fmt(getattr(r, col)) for col in REPORT_COLUMNS[1:]]
            )
        )
    agg = report.aggregate
    mean_row = ["mean"]
    for col in REPORT_COLUMNS[1:]:
        if col == "final_loss_sem":
            mean_row.append(_fmt(agg["mean_final_loss_sem"]))
        else:
            side, metric = col.split("_", 1)
            mean_row.append(_fmt(agg[f"mean_{side}_{metric}"]))
    lines.append(",".join(mean_row))
    return "\n".join(lines) + "\n"


def histogram_csv(stats: AcceptedLengthStats) -> str:
    lines = ["a,frequency"]
    lines += [f"{a},{_fmt(f)}" for a, f in sorted(stats.histogram.items())]
    return "\n".join(lines) + "\n"


def survival_csv(stats: AcceptedLengthStats) -> str:
    lines = ["k,survival"]
    lines += [f"{k},{_fmt(p)}" for k, p in sorted(stats.survival.items())]
    return "\n".join(lines) + "\n"
