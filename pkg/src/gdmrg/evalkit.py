"""
Evaluation metrics: clinical-efficacy (CE) P/R/F1 over the 14 core diseases,
ROC/AUC, corpus BLEU-1..4, ROUGE-L and the complex-case breakdown.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ShapeError
from .labels import CORE_DISEASES, DISEASES, N_CORE
from .utils.prompt_loader import ReportClauses, load_report_clauses

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


# ---------------- CE ----------------

def _binary_pair(pred, true, op: str) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ShapeError(op, pred.shape, true.shape)
    for arr in (pred, true):
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{op}: entries must be binary")
    return pred.astype(bool)[:, :N_CORE], true.astype(bool)[:, :N_CORE]


def _prf(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def confusion_counts(pred: np.ndarray, true: np.ndarray) -> pd.DataFrame:
    pred, true = _binary_pair(pred, true, "confusion_counts")
    names = list(CORE_DISEASES[: pred.shape[1]])
    return pd.DataFrame({
        "tp": (pred & true).sum(axis=0),
        "fp": (pred & ~true).sum(axis=0),
        "fn": (~pred & true).sum(axis=0),
        "tn": (~pred & ~true).sum(axis=0),
    }, index=pd.Index(names, name="disease"))


@dataclass
class CeMetrics:
    micro: tuple[float, float, float]
    sample: tuple[float, float, float]
    per_class: pd.DataFrame         # index disease; precision, recall, f1, tp, fp, fn, tn
    n: int

    @property
    def micro_f1(self) -> float:
        return self.micro[2]

    @property
    def macro(self) -> tuple[float, float, float]:
        """Unweighted mean of the per-class precision, recall and F1."""
        if self.per_class.empty:
            return 0.0, 0.0, 0.0
        return tuple(float(self.per_class[c].mean()) for c in ("precision", "recall", "f1"))


def ce_metrics(pred_binary: np.ndarray, true_binary: np.ndarray) -> CeMetrics:
    pred, true = _binary_pair(pred_binary, true_binary, "ce_metrics")
    counts = confusion_counts(pred, true)
    micro = _prf(*(float(counts[c].sum()) for c in ("tp", "fp", "fn")))

    per_class = counts.copy()
    prf = [_prf(row.tp, row.fp, row.fn) for row in counts.itertuples()]
    per_class["precision"] = [x[0] for x in prf]
    per_class["recall"] = [x[1] for x in prf]
    per_class["f1"] = [x[2] for x in prf]

    tp = (pred & true).sum(axis=1).astype(np.float64)
    n_pred = pred.sum(axis=1).astype(np.float64)
    n_true = true.sum(axis=1).astype(np.float64)
    both_empty = (n_pred == 0) & (n_true == 0)
    p_s = np.where(both_empty, 1.0, np.divide(tp, n_pred, out=np.zeros_like(tp), where=n_pred > 0))
    r_s = np.where(both_empty, 1.0, np.divide(tp, n_true, out=np.zeros_like(tp), where=n_true > 0))
    denom = n_pred + n_true
    f_s = np.where(both_empty, 1.0, np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0))
    n = len(pred)
    sample = (float(p_s.mean()), float(r_s.mean()), float(f_s.mean())) if n else (0.0, 0.0, 0.0)
    return CeMetrics(micro=micro, sample=sample, per_class=per_class[["precision", "recall", "f1", "tp", "fp", "fn", "tn"]], n=n)


def complex_subset(true_binary: np.ndarray, min_positives: int = 2) -> np.ndarray:
    """Row indices with at least min_positives true positives among the core diseases."""
    true = np.asarray(true_binary)[:, :N_CORE]
    return np.flatnonzero(true.sum(axis=1) >= min_positives)


# ---------------- ROC / AUC ----------------

def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC over distinct score thresholds (descending), starting at (0, 0, +inf)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.float64)
    if scores.shape != labels.shape:
        raise ShapeError("roc_curve", scores.shape, labels.shape)
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    distinct = np.flatnonzero(np.diff(scores))
    idx = np.concatenate([distinct, [labels.size - 1]]) if labels.size else np.zeros(0, dtype=np.int64)
    tps = np.cumsum(labels)[idx] if labels.size else np.zeros(0)
    fps = 1 + idx - tps
    tps = np.concatenate([[0.0], tps])
    fps = np.concatenate([[0.0], fps])
    with np.errstate(invalid="ignore", divide="ignore"):
        fpr = fps / fps[-1] if fps[-1] > 0 else np.full_like(fps, np.nan)
        tpr = tps / tps[-1] if tps[-1] > 0 else np.full_like(tps, np.nan)
    thresholds = np.concatenate([[np.inf], scores[idx]])
    return fpr, tpr, thresholds


def auc(scores, labels) -> float:
    """Trapezoidal ROC area; NaN when only one class is present."""
    labels = np.asarray(labels).ravel()
    if labels.size == 0 or labels.min() == labels.max():
        return math.nan
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(_trapezoid(tpr, fpr))


def per_class_auc(probs: np.ndarray, true_binary: np.ndarray) -> pd.Series:
    probs = np.asarray(probs)[:, :N_CORE]
    true = np.asarray(true_binary)[:, :N_CORE]
    return pd.Series([auc(probs[:, d], true[:, d]) for d in range(probs.shape[1])], index=list(CORE_DISEASES[: probs.shape[1]]), name="auc")


def roc_table(probs: np.ndarray, true_binary: np.ndarray) -> pd.DataFrame:
    rows = []
    for d, name in enumerate(CORE_DISEASES[: min(N_CORE, np.asarray(probs).shape[1])]):
        fpr, tpr, thr = roc_curve(np.asarray(probs)[:, d], np.asarray(true_binary)[:, d])
        rows.append(pd.DataFrame({"disease": name, "threshold": thr, "fpr": fpr, "tpr": tpr}))
    return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=["disease", "threshold", "fpr", "tpr"])


# ---------------- text metrics ----------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n (clipped precisions, geometric mean, brevity penalty, no smoothing)."""
    if not candidates:
        raise ValueError("bleu: empty candidate set")
    if len(candidates) != len(references):
        raise ShapeError("bleu", (len(candidates),), (len(references),))
    matched = np.zeros(max_n)
    total = np.zeros(max_n)
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    for cand, ref in zip(candidates, references):
        for n in range(1, max_n + 1):
            c_ngrams, r_ngrams = _ngrams(cand, n), _ngrams(ref, n)
            matched[n - 1] += sum(min(count, r_ngrams[g]) for g, count in c_ngrams.items())
            total[n - 1] += max(len(cand) - n + 1, 0)

    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if total[n] == 0 or matched[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    if len(candidates) != len(references):
        raise ShapeError("rouge_l", (len(candidates),), (len(references),))
    if not candidates:
        return 0.0
    scores = []
    for cand, ref in zip(candidates, references):
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        scores.append(2 * p * r / (p + r))
    return float(np.mean(scores))


def extract_positive_findings(tokens: Sequence[str], clauses: ReportClauses | None = None, n_nodes: int = len(DISEASES)) -> np.ndarray:
    """Inverse of the report template: a disease is positive when its clause appears verbatim."""
    clauses = clauses or load_report_clauses()
    tokens = list(tokens)
    out = np.zeros(n_nodes, dtype=np.int64)
    for d, name in enumerate(DISEASES[:n_nodes]):
        clause = list(clauses.positive[name])
        k = len(clause)
        if any(tokens[i: i + k] == clause for i in range(len(tokens) - k + 1)):
            out[d] = 1
    return out


def text_ce_metrics(generated: Sequence[Sequence[str]], true_binary: np.ndarray) -> CeMetrics:
    true = np.asarray(true_binary)
    extracted = np.stack([extract_positive_findings(g, n_nodes=true.shape[1]) for g in generated]) if len(generated) else np.zeros_like(true)
    return ce_metrics(extracted, true)


# ---------------- report ----------------

@dataclass
class MetricsReport:
    ce: CeMetrics
    auc: pd.Series
    bleu: list[float] = field(default_factory=list)
    rouge_l: float = math.nan
    complex_ce: CeMetrics | None = None
    text_ce: CeMetrics | None = None

    def rows(self) -> list[tuple[str, float, int]]:
        n = self.ce.n
        rows = [
            ("micro_precision", self.ce.micro[0], n),
            ("micro_recall", self.ce.micro[1], n),
            ("micro_f1", self.ce.micro[2], n),
            ("sample_precision", self.ce.sample[0], n),
            ("sample_recall", self.ce.sample[1], n),
            ("sample_f1", self.ce.sample[2], n),
            ("macro_precision", self.ce.macro[0], n),
            ("macro_recall", self.ce.macro[1], n),
            ("macro_f1", self.ce.macro[2], n),
            ("macro_auc", float(self.auc.mean(skipna=True)) if self.auc.notna().any() else math.nan, int(self.auc.notna().sum())),
        ]
        rows += [(f"bleu_{i + 1}", b, n) for i, b in enumerate(self.bleu)]
        rows.append(("rouge_l", self.rouge_l, n))
        for name, row in self.ce.per_class.iterrows():
            for col in ("precision", "recall", "f1", "tp", "fp", "fn", "tn"):
                rows.append((f"{col}/{name}", float(row[col]), n))
            rows.append((f"auc/{name}", float(self.auc.get(name, math.nan)), n))
        if self.complex_ce is not None:
            m = self.complex_ce.n
            rows += [("complex/micro_precision", self.complex_ce.micro[0], m), ("complex/micro_recall", self.complex_ce.micro[1], m), ("complex/micro_f1", self.complex_ce.micro[2], m)]
            rows += [(f"complex/f1/{name}", float(f), m) for name, f in self.complex_ce.per_class["f1"].items()]
        if self.text_ce is not None:
            rows += [("text_ce/micro_f1", self.text_ce.micro[2], self.text_ce.n), ("text_ce/sample_f1", self.text_ce.sample[2], self.text_ce.n)]
        return rows

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows(), columns=["name", "value", "n"])

    def summary(self) -> dict[str, float]:
        out = {"precision": self.ce.micro[0], "recall": self.ce.micro[1], "f1": self.ce.micro[2]}
        out.update({f"bleu_{i + 1}": b for i, b in enumerate(self.bleu)})
        out["rouge_l"] = self.rouge_l
        return out


def build_report(
    pred_binary: np.ndarray,
    true_binary: np.ndarray,
    probs: np.ndarray,
    generated: Sequence[Sequence[str]] | None = None,
    references: Sequence[Sequence[str]] | None = None,
) -> MetricsReport:
    report = MetricsReport(ce=ce_metrics(pred_binary, true_binary), auc=per_class_auc(probs, true_binary))
    if generated is not None and references is not None and len(generated):
        report.bleu = bleu(generated, references)
        report.rouge_l = rouge_l(generated, references)
        report.text_ce = text_ce_metrics(generated, true_binary)
    idx = complex_subset(true_binary)
    if idx.size:
        report.complex_ce = ce_metrics(np.asarray(pred_binary)[idx], np.asarray(true_binary)[idx])
    return report


def write_metrics_csv(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(path, index=False, float_format="%.6f")
    return path
