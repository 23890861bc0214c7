"""Full-catalog ranking metrics, Avg.Change smoothness and subgroup reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import FREQUENCY_BUCKETS, LENGTH_BUCKETS, InteractionSequence, bucket, eval_inputs

RECALL_KS = (1, 5, 10)
NDCG_KS = (5, 10)
TIE_MODES = ("optimistic", "pessimistic", "mid")


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    mrr: float
    avg_change: float
    per_step_avg_change: dict[int, float] = field(default_factory=dict)
    subgroup: dict[str, tuple[float, float]] = field(default_factory=dict)
    subgroup_sizes: dict[str, int] = field(default_factory=dict)
    avg_change_shifted: float = 0.0
    users: int = 0

    def flat(self) -> dict[str, float]:
        out = {f"recall@{k}": v for k, v in self.recall.items()}
        out.update({f"ndcg@{k}": v for k, v in self.ndcg.items()})
        out["mrr"] = self.mrr
        out["avg_change"] = self.avg_change
        out["avg_change_shifted_fraction"] = self.avg_change_shifted
        out["users"] = self.users
        for t, v in sorted(self.per_step_avg_change.items()):
            out[f"avg_change.t{t}"] = v
        for name, (rec, ndcg) in self.subgroup.items():
            out[f"subgroup.{name}.recall@10"] = rec
            out[f"subgroup.{name}.ndcg@10"] = ndcg
            out[f"subgroup.{name}.size"] = self.subgroup_sizes[name]
        return out

    def table(self) -> str:
        rows = [f"{'metric':<28}{'value':>10}"]
        for key, value in self.flat().items():
            rows.append(f"{key:<28}{value:>10.4f}" if isinstance(value, float) else f"{key:<28}{value:>10}")
        return "\n".join(rows) + "\n"


def target_ranks(scores: np.ndarray, targets: np.ndarray, tie_mode: str = "optimistic") -> np.ndarray:
    """1-based rank of each target; column k of ``scores`` is item k + 1."""
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 1) or np.any(targets > scores.shape[1]):
        raise ValueError("targets must be item indices in [1, item_count]; 0 is padding")
    target_scores = scores[np.arange(len(targets)), targets - 1][:, None]
    greater = (scores > target_scores).sum(1)
    if tie_mode == "optimistic":
        return 1 + greater
    ties = (scores == target_scores).sum(1) - 1
    if tie_mode == "pessimistic":
        return 1 + greater + ties
    if tie_mode == "mid":
        return 1 + greater + ties / 2.0
    raise ValueError(f"unknown tie mode {tie_mode!r}")


def metrics_from_ranks(ranks: np.ndarray, recall_ks=RECALL_KS, ndcg_ks=NDCG_KS):
    ranks = np.asarray(ranks, dtype=np.float64)
    recall = {k: float(np.mean(ranks <= k)) for k in recall_ks}
    ndcg = {k: float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0))) for k in ndcg_ks}
    return recall, ndcg, float(np.mean(1.0 / ranks))


def rank_metrics(scores, targets, recall_ks=RECALL_KS, ndcg_ks=NDCG_KS, tie_mode: str = "optimistic"):
    """(recall@K, ndcg@K, mrr) with every catalog item as a candidate."""
    return metrics_from_ranks(target_ranks(scores, targets, tie_mode), recall_ks, ndcg_ks)


def avg_change(scores_row, top_n: int = 40, return_shifted: bool = False):
    """Mean absolute percentage change between consecutive top-``top_n`` scores.

    Scores are sorted descending; when any of the top scores is <= 0 they are
    all shifted by 1 - min so the ratios are defined.
    """
    if top_n < 2:
        raise ValueError("top_n must be >= 2")
    s = np.asarray(scores_row, dtype=np.float64).ravel()
    if s.size < top_n:
        raise ValueError(f"need {top_n} candidates, got {s.size}")
    top = -np.sort(-s)[:top_n]
    shifted = bool(top[-1] <= 0)
    if shifted:
        top = top + (1.0 - top[-1])
    value = float(np.mean(np.abs(np.diff(top)) / top[:-1]) * 100.0)
    return (value, shifted) if return_shifted else value


def mean_avg_change(scores: np.ndarray, top_n: int = 40) -> tuple[float, float]:
    """(mean Avg.Change over rows, fraction of rows that needed a shift)."""
    pairs = [avg_change(row, top_n, return_shifted=True) for row in np.asarray(scores)]
    return float(np.mean([v for v, _ in pairs])), float(np.mean([s for _, s in pairs]))


@torch.no_grad()
def batched_scores(model, histories: np.ndarray, t: int = 0, batch_size: int = 1024) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(histories), batch_size):
        ids = torch.as_tensor(histories[start : start + batch_size])
        out.append(model.predict_scores(ids, t).cpu().numpy())
    return np.concatenate(out, axis=0)


@torch.no_grad()
def per_step_analysis(model, histories: np.ndarray, top_n: int = 40, batch_size: int = 1024) -> dict[int, float]:
    """Average Avg.Change of the deterministic-mean scores at every step T..0."""
    model.eval()
    result = {}
    for t in range(model.T, -1, -1):
        scores = batched_scores(model, histories, t, batch_size)
        result[t] = mean_avg_change(scores, min(top_n, scores.shape[1]))[0]
    return result


def subgroup_report(ranks: np.ndarray, labels: Sequence[str]) -> tuple[dict[str, tuple[float, float]], dict[str, int]]:
    """Recall@10 / NDCG@10 per label; labels with no members are omitted."""
    ranks = np.asarray(ranks)
    labels = np.asarray(labels)
    values, sizes = {}, {}
    for name in LENGTH_BUCKETS + FREQUENCY_BUCKETS:
        members = labels == name
        if not members.any():
            continue
        recall, ndcg, _ = metrics_from_ranks(ranks[members], (10,), (10,))
        values[name] = (recall[10], ndcg[10])
        sizes[name] = int(members.sum())
    return values, sizes


def evaluate(
    model,
    sequences: Sequence[InteractionSequence],
    split: str = "test",
    t_infer: int = 0,
    top_n: int = 40,
    tie_mode: str = "optimistic",
    per_step: bool = True,
    include_valid_frequency: bool = False,
    batch_size: int = 1024,
) -> MetricsReport:
    histories, targets = eval_inputs(sequences, split, model.max_len)
    scores = batched_scores(model, histories, t_infer, batch_size)
    ranks = target_ranks(scores, targets, tie_mode)
    recall, ndcg, mrr = metrics_from_ranks(ranks)
    n_top = min(top_n, scores.shape[1])
    change, shifted = mean_avg_change(scores, n_top)
    buckets = bucket(sequences, split, include_valid_frequency)
    length_values, length_sizes = subgroup_report(ranks, [b[0] for b in buckets])
    freq_values, freq_sizes = subgroup_report(ranks, [b[1] for b in buckets])
    return MetricsReport(
        recall=recall,
        ndcg=ndcg,
        mrr=mrr,
        avg_change=change,
        per_step_avg_change=per_step_analysis(model, histories, n_top, batch_size) if per_step else {},
        subgroup={**length_values, **freq_values},
        subgroup_sizes={**length_sizes, **freq_sizes},
        avg_change_shifted=shifted,
        users=len(sequences),
    )


def write_report(report: MetricsReport, outdir, prefix: str = "") -> dict[str, Path]:
    """Write metrics.txt (flat key-value), metrics_table.txt and two-column plot data.

    Plot data: per_step.dat (t, avg_change), subgroup_recall.dat and
    subgroup_ndcg.dat (bucket, value at 10).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": outdir / f"{prefix}metrics.txt",
        "table": outdir / f"{prefix}metrics_table.txt",
        "per_step": outdir / f"{prefix}per_step.dat",
        "subgroup_recall": outdir / f"{prefix}subgroup_recall.dat",
        "subgroup_ndcg": outdir / f"{prefix}subgroup_ndcg.dat",
    }
    flat = report.flat()
    paths["metrics"].write_text("".join(f"metric.{k} = {v}\n" for k, v in flat.items()), encoding="utf-8")
    paths["table"].write_text(report.table(), encoding="utf-8")
    paths["per_step"].write_text(
        "# t avg_change\n" + "".join(f"{t}\t{v}\n" for t, v in sorted(report.per_step_avg_change.items())),
        encoding="utf-8",
    )
    for slot, key in ((0, "subgroup_recall"), (1, "subgroup_ndcg")):
        body = "".join(f"{name}\t{vals[slot]}\n" for name, vals in report.subgroup.items())
        paths[key].write_text(f"# bucket {key.split('_')[1]}@10\n" + body, encoding="utf-8")
    return paths
