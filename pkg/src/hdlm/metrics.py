"""Evaluation metrics: accuracy, micro/macro F1, BLEU-2, ROUGE-L, CIDEr.

All scores live in [0, 1] in memory. Report emission multiplies the
classification and overlap scores by 100 to line up with percentage tables;
the n-gram cosine score is emitted raw with a x10 convenience column since
published scalings of it vary.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass

from .errors import DataError


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def micro_macro_f1(preds: list[str], golds: list[str],
                   labels: set[str] | None = None) -> tuple[float, float]:
    """Single-label multiclass F1. Micro equals plain accuracy here; macro
    averages per-class F1 over the classes that actually occur (restricted
    to `labels` when given)."""
    if not preds or len(preds) != len(golds):
        raise DataError(f"need equal nonempty lists, got {len(preds)} vs {len(golds)}")
    present = set(preds) | set(golds)
    if labels is not None:
        present &= labels
    tp, fp, fn = Counter(), Counter(), Counter()
    for p, g in zip(preds, golds):
        if p == g:
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    correct = sum(tp.values())
    micro = correct / len(preds)
    per_class = []
    for c in present:
        denom = 2 * tp[c] + fp[c] + fn[c]
        per_class.append(2 * tp[c] / denom if denom else 0.0)
    macro = sum(per_class) / len(per_class) if per_class else 0.0
    return micro, macro


def accuracy(preds: list[str], golds: list[str]) -> float:
    if not preds or len(preds) != len(golds):
        raise DataError(f"need equal nonempty lists, got {len(preds)} vs {len(golds)}")
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)


# ---------------------------------------------------------------------------
# n-gram overlap
# ---------------------------------------------------------------------------

def _ngrams(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu2(pred: str, refs: list[str]) -> float:
    """Bigram BLEU: geometric mean of clipped 1- and 2-gram precisions with
    the e^{1-r/c} brevity penalty (r = closest reference length). Zero
    precisions are floored at 1e-9 rather than zeroing the whole score."""
    cand = pred.split()
    ref_words = [r.split() for r in refs]
    if not cand:
        warnings.warn("scoring an empty prediction as 0")
        return 0.0
    if not ref_words or not all(ref_words):
        raise DataError("references must be nonempty")
    c = len(cand)
    r = min((abs(len(rw) - c), len(rw)) for rw in ref_words)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    log_sum = 0.0
    for n in (1, 2):
        counts = _ngrams(cand, n)
        max_ref = Counter()
        for rw in ref_words:
            for g, k in _ngrams(rw, n).items():
                max_ref[g] = max(max_ref[g], k)
        clipped = sum(min(k, max_ref[g]) for g, k in counts.items())
        total = sum(counts.values())
        p = clipped / total if total else 0.0
        log_sum += 0.5 * math.log(max(p, 1e-9))
    return bp * math.exp(log_sum)


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: str, ref: str, beta: float = 1.0) -> float:
    """LCS F-measure: R = LCS/len(ref), P = LCS/len(pred),
    F = (1+beta^2) R P / (R + beta^2 P). beta=inf returns recall alone."""
    p_words, r_words = pred.split(), ref.split()
    if not p_words or not r_words:
        raise DataError("rouge_l needs nonempty prediction and reference")
    lcs = _lcs_len(p_words, r_words)
    if lcs == 0:
        return 0.0
    recall = lcs / len(r_words)
    precision = lcs / len(p_words)
    if math.isinf(beta):
        return recall
    b2 = beta * beta
    return (1 + b2) * recall * precision / (recall + b2 * precision)


def cider(preds: list[str], refs: list[str]) -> float:
    """Mean TF-IDF n-gram cosine (n = 1..4) between predictions and their
    references, averaged over the corpus. IDF comes from the reference side;
    a singleton corpus leaves IDF degenerate and is refused."""
    if len(preds) != len(refs):
        raise DataError(f"corpus sizes differ: {len(preds)} vs {len(refs)}")
    if len(refs) < 2:
        raise DataError("n-gram IDF needs a corpus of at least 2 items")
    n_docs = len(refs)
    ref_words = [r.split() for r in refs]
    total = 0.0
    for n in range(1, 5):
        df = Counter()
        for rw in ref_words:
            df.update(set(_ngrams(rw, n)))
        idf = {g: math.log(n_docs) - math.log(max(k, 1)) for g, k in df.items()}

        def vec(words):
            return {g: k * idf.get(g, 0.0) for g, k in _ngrams(words, n).items()}

        for pred, rw in zip(preds, ref_words):
            vp, vr = vec(pred.split()), vec(rw)
            dot = sum(v * vr.get(g, 0.0) for g, v in vp.items())
            np_, nr = math.sqrt(sum(v * v for v in vp.values())), math.sqrt(sum(v * v for v in vr.values()))
            total += dot / (np_ * nr) if np_ > 0 and nr > 0 else 0.0
    return total / (4 * n_docs)


# ---------------------------------------------------------------------------
# assembled report
# ---------------------------------------------------------------------------

@dataclass
class LevelMetrics:
    accuracy: float
    micro_f1: float | None = None
    macro_f1: float | None = None
    bleu2: float | None = None
    rouge_l: float | None = None
    cider: float | None = None


@dataclass
class MetricReport:
    levels: list[LevelMetrics]
    bottom_micro_f1: float | None

    def to_dict(self) -> dict:
        """Emission form: percentages for bounded scores, raw + x10 for the
        n-gram cosine."""
        out_levels = []
        for m in self.levels:
            entry = {"accuracy": 100.0 * m.accuracy}
            for key in ("micro_f1", "macro_f1", "bleu2", "rouge_l"):
                v = getattr(m, key)
                if v is not None:
                    entry[key] = 100.0 * v
            if m.cider is not None:
                entry["cider"] = m.cider
                entry["cider_x10"] = 10.0 * m.cider
            out_levels.append(entry)
        rep = {"levels": out_levels}
        if self.bottom_micro_f1 is not None:
            rep["bottom_micro_f1"] = 100.0 * self.bottom_micro_f1
        return rep


def evaluate_levels(pred_texts: list[list[str]], gold_texts: list[list[str]],
                    beta: float = 1.0) -> MetricReport:
    """Score decoded responses level by level.

    A level whose gold responses are all single words is scored as
    classification (accuracy, micro/macro F1); anything longer gets the
    generation metrics too. Exact-match accuracy is reported everywhere.
    `beta` weights recall in the subsequence-overlap score.
    """
    if not pred_texts or len(pred_texts) != len(gold_texts):
        raise DataError("prediction and gold corpora must align")
    depth = len(gold_texts[0])
    if any(len(p) != depth or len(g) != depth for p, g in zip(pred_texts, gold_texts)):
        raise DataError("all samples must carry one response per level")
    levels = []
    bottom_micro = None
    for d in range(depth):
        preds = [p[d] for p in pred_texts]
        golds = [g[d] for g in gold_texts]
        m = LevelMetrics(accuracy=accuracy(preds, golds))
        if all(len(g.split()) == 1 for g in golds):
            m.micro_f1, m.macro_f1 = micro_macro_f1(preds, golds)
            bottom_micro = m.micro_f1
        else:
            nonempty = [(p, g) for p, g in zip(preds, golds) if g.split()]
            m.bleu2 = sum(bleu2(p, [g]) for p, g in nonempty) / len(nonempty)
            m.rouge_l = sum(rouge_l(p, g, beta) for p, g in nonempty if p.split()) / len(nonempty)
            if len(nonempty) >= 2:
                m.cider = cider([p for p, _ in nonempty], [g for _, g in nonempty])
        levels.append(m)
    return MetricReport(levels=levels, bottom_micro_f1=bottom_micro)
