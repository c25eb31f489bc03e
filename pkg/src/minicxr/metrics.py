"""Clinical evaluation metrics: findings F1, hallucination rate, ROUGE-L,
robustness under input perturbations, and efficiency statistics."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import lexicon
from .kgam import parse_assertions
from .lexicon import CATALOG, CRITICAL_INDICES
from .synthetic import FindingsVector, SyntheticStudy, perturb
from .vocab import TokenSeq, Vocabulary


def label_findings(report: TokenSeq, vocab: Vocabulary) -> FindingsVector:
    """Findings asserted present, after synonym canonicalization."""
    present: set[int] = set()
    for a in parse_assertions(report, vocab):
        if a.polarity != "present":
            continue
        root = lexicon.synonym_root(a.entity)
        if root in lexicon.FINDING_INDEX:
            present.add(lexicon.FINDING_INDEX[root])
    return FindingsVector.from_indices(present)


def _subset_indices(subset: int) -> tuple[int, ...]:
    if subset == 14:
        return tuple(range(len(CATALOG)))
    if subset == 5:
        return CRITICAL_INDICES
    raise ValueError(f"subset must be 14 or 5, got {subset}")


def f1_scores(preds: list[FindingsVector], truths: list[FindingsVector],
              subset: int = 14) -> tuple[float, float]:
    """(macro, micro) F1 in percent over the 14-way or critical-5 label set.

    Per-finding F1 uses the 0/0 := 0 convention; macro is the unweighted
    mean over the subset, micro pools TP/FP/FN across it.
    """
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise ValueError("empty prediction list")
    idx = _subset_indices(subset)
    tp = np.zeros(len(idx))
    fp = np.zeros(len(idx))
    fn = np.zeros(len(idx))
    for p, t in zip(preds, truths):
        for j, i in enumerate(idx):
            if p[i] and t[i]:
                tp[j] += 1
            elif p[i] and not t[i]:
                fp[j] += 1
            elif not p[i] and t[i]:
                fn[j] += 1
    denom = 2 * tp + fp + fn
    per = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    macro = float(per.mean()) * 100.0
    pooled = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = float(2 * tp.sum() / pooled) * 100.0 if pooled > 0 else 0.0
    return macro, micro


def hallucination_rate(reports: list[TokenSeq], truths: list[FindingsVector],
                       vocab: Vocabulary) -> float:
    """Percent of reports asserting present a finding absent in truth.

    Omissions never count; only fabricated present-assertions do.
    """
    if len(reports) != len(truths):
        raise ValueError(f"{len(reports)} reports vs {len(truths)} truths")
    bad = 0
    for rep, t in zip(reports, truths):
        labeled = label_findings(rep, vocab)
        if any(labeled[i] and not t[i] for i in range(len(CATALOG))):
            bad += 1
    return 100.0 * bad / len(reports) if reports else 0.0


def _lcs_length(a: tuple, b: tuple) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(reference: TokenSeq, hypothesis: TokenSeq, beta: float = 1.0) -> float:
    """LCS F-measure over content tokens; beta weighs recall vs precision."""
    ref = reference.content_ids()
    hyp = hypothesis.content_ids()
    if not ref and not hyp:
        return 1.0
    if not ref or not hyp:
        return 0.0
    lcs = _lcs_length(ref, hyp)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


DEFAULT_PERTURBATION_GRID: tuple[tuple[str, float], ...] = (
    ("rotation", 3.0),
    ("scaling", 1.03),
    ("noise", 0.03),
)


def robustness_suite(generator, studies: list[SyntheticStudy], vocab: Vocabulary,
                     grid=DEFAULT_PERTURBATION_GRID, seed: int = 0) -> dict[str, float]:
    """Mean ROUGE-L between greedy reports for original and perturbed images."""
    originals = {s.study_id: generator.generate(s.image, s.prompt, temperature=None)
                 for s in studies}
    means: dict[str, float] = {}
    for kind, magnitude in grid:
        scores = []
        for s in studies:
            pert = perturb(s.image, kind, magnitude, seed=seed + s.seed % 10000)
            rep = generator.generate(pert, s.prompt, temperature=None)
            scores.append(rouge_l(originals[s.study_id], rep))
        means[kind] = float(np.mean(scores))
    return means


def efficiency_stats(generator, studies: list[SyntheticStudy]) -> tuple[float, float]:
    """(mean wall seconds per report, mean content-token length), greedy."""
    times = []
    lengths = []
    for s in studies:
        t0 = time.perf_counter()
        rep = generator.generate(s.image, s.prompt, temperature=None)
        times.append(time.perf_counter() - t0)
        lengths.append(len(rep.content_ids()))
    if not studies:
        return 0.0, 0.0
    return float(np.mean(times)), float(np.mean(lengths))


def terminology_adherence(reports: list[TokenSeq], vocab: Vocabulary) -> float:
    """Canonical medical-term occurrences / (canonical + synonym), percent.

    Phrase occurrences are counted with the same longest-first matcher the
    parser uses; reports with no medical terms contribute nothing.
    """
    canonical = 0
    synonym = 0
    for rep in reports:
        for a in parse_assertions(rep, vocab):
            root = lexicon.synonym_root(a.entity)
            if root not in lexicon.FINDING_INDEX:
                continue
            if a.entity == root:
                canonical += 1
            else:
                synonym += 1
    total = canonical + synonym
    return 100.0 * canonical / total if total else 100.0


@dataclass
class MetricReport:
    """All table metrics for one evaluation run; F1 values in percent."""

    macro_f1_14: float
    micro_f1_14: float
    macro_f1_5: float
    micro_f1_5: float
    average_score: float
    hallucination_rate: float
    terminology_adherence: float
    mean_report_length: float
    mean_gen_time: float

    UNITS = {
        "macro_f1_14": "percent", "micro_f1_14": "percent",
        "macro_f1_5": "percent", "micro_f1_5": "percent",
        "average_score": "percent", "hallucination_rate": "percent",
        "terminology_adherence": "percent",
        "mean_report_length": "tokens", "mean_gen_time": "seconds",
    }

    def to_table(self) -> str:
        width = max(len(f.name) for f in fields(self))
        lines = [f"{f.name:<{width}}  {getattr(self, f.name):10.4f}  {self.UNITS[f.name]}"
                 for f in fields(self)]
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        lines = [json.dumps({"metric": f.name, "value": round(getattr(self, f.name), 6),
                             "unit": self.UNITS[f.name]}, sort_keys=True)
                 for f in fields(self)]
        return "\n".join(lines) + "\n"

    def save(self, path, fmt: str = "table") -> None:
        text = self.to_table() if fmt == "table" else self.to_records()
        Path(path).write_text(text, encoding="utf-8")


def evaluate_reports(reports: list[TokenSeq], studies: list[SyntheticStudy],
                     vocab: Vocabulary, mean_gen_time: float = 0.0) -> MetricReport:
    """Score generated reports against their studies' ground truth."""
    truths = [s.findings for s in studies]
    preds = [label_findings(r, vocab) for r in reports]
    ma14, mi14 = f1_scores(preds, truths, 14)
    ma5, mi5 = f1_scores(preds, truths, 5)
    return MetricReport(
        macro_f1_14=ma14, micro_f1_14=mi14, macro_f1_5=ma5, micro_f1_5=mi5,
        average_score=float(np.mean([ma14, mi14, ma5, mi5])),
        hallucination_rate=hallucination_rate(reports, truths, vocab),
        terminology_adherence=terminology_adherence(reports, vocab),
        mean_report_length=float(np.mean([len(r.content_ids()) for r in reports])),
        mean_gen_time=mean_gen_time,
    )
