"""N-gram generation metrics: BLEU, chrF++, TER, ROUGE-L, NIST, CIDEr.

All functions take ``candidates`` (list of strings) and ``reference_sets``
(list of lists of strings, one list per candidate). Word-level metrics
tokenize by lowercasing and splitting punctuation into separate tokens.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import ContractError, ParseError

_TOKEN = re.compile(r"\w+|[^\w\s]", re.UNICODE)

LOWER_IS_BETTER = frozenset({"TER"})


def tokenize(text: str) -> list:
    return _TOKEN.findall(text.lower())


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(candidates, reference_sets, name):
    if len(candidates) != len(reference_sets):
        raise ContractError(f"{name}: {len(candidates)} candidates vs {len(reference_sets)} reference sets")
    for i, refs in enumerate(reference_sets):
        if isinstance(refs, str) or not refs:
            raise ContractError(f"{name}: reference set {i} must be a non-empty list of strings")


# -- BLEU ----------------------------------------------------------------------


def bleu_statistics(candidates, reference_sets, max_n: int = 4):
    """Pooled clipped matches, candidate n-gram totals, and lengths."""
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, reference_sets):
        c = tokenize(cand)
        rs = [tokenize(r) for r in refs]
        cand_len += len(c)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
        for n in range(1, max_n + 1):
            cn = ngrams(c, n)
            max_ref: Counter = Counter()
            for r in rs:
                max_ref |= ngrams(r, n)
            matches[n - 1] += sum(min(k, max_ref[g]) for g, k in cn.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    return matches, totals, cand_len, ref_len


def corpus_bleu(candidates, reference_sets, max_n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU on a 0-100 scale.

    Without ``smooth`` any zero pooled precision gives 0. ``smooth`` adds
    one to numerator and denominator of orders above 1.
    """
    _check(candidates, reference_sets, "corpus_bleu")
    matches, totals, c, r = bleu_statistics(candidates, reference_sets, max_n)
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p / max_n)


# -- chrF++ -----------------------------------------------------------------------


def _chrf_stats(hyp: str, ref: str, char_order: int, word_order: int) -> list:
    stats = []
    h_chars, r_chars = "".join(hyp.split()), "".join(ref.split())
    for n in range(1, char_order + 1):
        hc, rc = ngrams(h_chars, n), ngrams(r_chars, n)
        stats.append((sum(hc.values()), sum(rc.values()), sum((hc & rc).values())))
    # word n-grams keep punctuation attached, as in the reference chrF++ tool
    hw, rw = hyp.split(), ref.split()
    for n in range(1, word_order + 1):
        hc, rc = ngrams(hw, n), ngrams(rw, n)
        stats.append((sum(hc.values()), sum(rc.values()), sum((hc & rc).values())))
    return stats


def _chrf_from_stats(stats, beta: float) -> float:
    prec = rec = 0.0
    eff = 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp > 0 and n_ref > 0:
            prec += n_match / n_hyp
            rec += n_match / n_ref
            eff += 1
    if eff == 0:
        return 0.0
    prec /= eff
    rec /= eff
    if prec + rec == 0:
        return 0.0
    b2 = beta**2
    return (1 + b2) * prec * rec / (b2 * prec + rec)


def chrf_pp(candidates, reference_sets, char_order: int = 6, word_order: int = 2, beta: float = 2.0) -> float:
    """chrF++ on a 0-100 scale.

    Statistics are pooled over the corpus; with several references the one
    giving the best sentence-level score is used for each segment.
    """
    _check(candidates, reference_sets, "chrf_pp")
    total = None
    for cand, refs in zip(candidates, reference_sets):
        best = max(
            (_chrf_stats(cand, r, char_order, word_order) for r in refs),
            key=lambda s: _chrf_from_stats(s, beta),
        )
        total = best if total is None else [tuple(a + b for a, b in zip(x, y)) for x, y in zip(total, best)]
    if total is None:
        return 0.0
    return 100.0 * _chrf_from_stats(total, beta)


# -- TER -----------------------------------------------------------------------------

MAX_SHIFTS = 50
MAX_SHIFT_SIZE = 10


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Word-level Levenshtein distance (unit costs)."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def _shift(words: list, start: int, length: int, dest: int) -> list:
    block = words[start:start + length]
    rest = words[:start] + words[start + length:]
    return rest[:dest] + block + rest[dest:]


def ter_edits(hyp: Sequence, ref: Sequence) -> int:
    """Shifts plus edit distance, with greedy best-improvement shift search."""
    hyp = list(hyp)
    ref = list(ref)
    shifts = 0
    current = edit_distance(hyp, ref)
    while shifts < MAX_SHIFTS and current > 0:
        best = None
        for start in range(len(hyp)):
            for length in range(1, min(MAX_SHIFT_SIZE, len(hyp) - start) + 1):
                block = hyp[start:start + length]
                targets = [j for j in range(len(ref) - length + 1) if ref[j:j + length] == block]
                if not targets:
                    break
                # candidate destinations: where the block sits in the reference
                for dest in sorted({min(j, len(hyp) - length) for j in targets}):
                    if dest == start:
                        continue
                    cand = _shift(hyp, start, length, dest)
                    d = edit_distance(cand, ref)
                    if d + 1 < current and (best is None or d < best[0]):
                        best = (d, cand)
        if best is None:
            break
        current, hyp = best
        shifts += 1
    return current + shifts


def ter(candidates, reference_sets) -> float:
    """Corpus TER: total edits over total (mean-per-segment) reference words."""
    _check(candidates, reference_sets, "ter")
    edits = 0.0
    words = 0.0
    for cand, refs in zip(candidates, reference_sets):
        h = tokenize(cand)
        rs = [tokenize(r) for r in refs]
        if any(len(r) == 0 for r in rs):
            raise ContractError("ter: empty reference")
        edits += min(ter_edits(h, r) for r in rs)
        words += sum(len(r) for r in rs) / len(rs)
    return edits / words if words else 0.0


# -- ROUGE-L -------------------------------------------------------------------------


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, reference_sets, beta: float = 1.2) -> float:
    """Mean sentence ROUGE-L F-measure with the E2E/COCO ``beta`` of 1.2.

    Per segment, precision and recall are each maximised over references.
    """
    _check(candidates, reference_sets, "rouge_l")
    scores = []
    for cand, refs in zip(candidates, reference_sets):
        c = tokenize(cand)
        precs, recs = [], []
        for r in refs:
            rt = tokenize(r)
            lcs = lcs_length(c, rt)
            precs.append(lcs / len(c) if c else 0.0)
            recs.append(lcs / len(rt) if rt else 0.0)
        p, r_ = max(precs), max(recs)
        scores.append(((1 + beta**2) * p * r_) / (r_ + beta**2 * p) if p and r_ else 0.0)
    return sum(scores) / len(scores) if scores else 0.0


# -- NIST ------------------------------------------------------------------------------


def nist_info_weights(reference_sets, max_n: int = 5) -> dict:
    """``info(w1..wn) = log2(count(w1..wn-1) / count(w1..wn))`` over all references."""
    counts: Counter = Counter()
    total_words = 0
    for refs in reference_sets:
        for r in refs:
            toks = tokenize(r)
            total_words += len(toks)
            for n in range(1, max_n + 1):
                counts.update(ngrams(toks, n))
    info = {}
    for g, c in counts.items():
        prefix_count = total_words if len(g) == 1 else counts[g[:-1]]
        info[g] = math.log2(prefix_count / c)
    return info


def nist(candidates, reference_sets, max_n: int = 5) -> float:
    """NIST score with the standard brevity penalty (0.5 at a 2/3 length ratio)."""
    _check(candidates, reference_sets, "nist")
    info = nist_info_weights(reference_sets, max_n)
    gained = [0.0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0.0
    for cand, refs in zip(candidates, reference_sets):
        c = tokenize(cand)
        rs = [tokenize(r) for r in refs]
        cand_len += len(c)
        ref_len += sum(len(r) for r in rs) / len(rs)
        for n in range(1, max_n + 1):
            cn = ngrams(c, n)
            max_ref: Counter = Counter()
            for r in rs:
                max_ref |= ngrams(r, n)
            totals[n - 1] += max(len(c) - n + 1, 0)
            for g, k in cn.items():
                m = min(k, max_ref[g])
                if m:
                    gained[n - 1] += m * info.get(g, 0.0)
    if cand_len == 0:
        return 0.0
    score = sum(g / t for g, t in zip(gained, totals) if t > 0)
    ratio = cand_len / ref_len if ref_len else 0.0
    beta = math.log(0.5) / math.log(1.5) ** 2
    bp = math.exp(beta * math.log(min(ratio, 1.0)) ** 2) if ratio > 0 else 0.0
    return score * bp


# -- CIDEr ------------------------------------------------------------------------------


def _tfidf(counts: Counter, df: Counter, n_docs: int):
    vec = {}
    for g, tf in counts.items():
        vec[g] = tf * math.log(max(1.0, n_docs) / max(1.0, df[g]))
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider_segments(candidates, reference_sets, max_n: int = 4, sigma: float = 6.0) -> list:
    """Per-segment CIDEr-D scores (x10 scale)."""
    _check(candidates, reference_sets, "cider")
    if len(reference_sets) < 2:
        raise ContractError("cider: need a corpus of at least two reference sets for idf")
    n_docs = len(reference_sets)
    ref_tok = [[tokenize(r) for r in refs] for refs in reference_sets]
    dfs = []
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in ref_tok:
            df.update(set(g for r in refs for g in ngrams(r, n)))
        dfs.append(df)
    out = []
    for cand, refs in zip(candidates, ref_tok):
        c = tokenize(cand)
        per_n = []
        for n in range(1, max_n + 1):
            cv, cnorm = _tfidf(ngrams(c, n), dfs[n - 1], n_docs)
            sims = []
            for r in refs:
                rv, rnorm = _tfidf(ngrams(r, n), dfs[n - 1], n_docs)
                val = sum(min(cv[g], rv[g]) * rv[g] for g in cv if g in rv)
                if cnorm and rnorm:
                    val /= cnorm * rnorm
                else:
                    val = 0.0
                delta = len(c) - len(r)
                sims.append(val * math.exp(-(delta**2) / (2 * sigma**2)))
            per_n.append(sum(sims) / len(sims))
        out.append(10.0 * sum(per_n) / max_n)
    return out


def cider(candidates, reference_sets, max_n: int = 4, sigma: float = 6.0) -> float:
    seg = cider_segments(candidates, reference_sets, max_n, sigma)
    return sum(seg) / len(seg)


# -- reports ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    scores: dict = field(default_factory=dict)
    candidate_count: int = 0
    external: set = field(default_factory=set)
    absent: list = field(default_factory=list)

    def direction(self, name: str) -> str:
        return "lower" if name in LOWER_IS_BETTER else "higher"

    def to_dict(self) -> dict:
        return {
            "scores": dict(self.scores),
            "candidate_count": self.candidate_count,
            "direction": {k: self.direction(k) for k in self.scores},
            "external": sorted(self.external),
            "absent": list(self.absent),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(dict(d["scores"]), int(d.get("candidate_count", 0)), set(d.get("external", [])), list(d.get("absent", [])))

    def merge(self, other: "MetricReport") -> "MetricReport":
        self.scores.update(other.scores)
        self.external |= other.external
        self.absent += [a for a in other.absent if a not in self.absent]
        return self


ALL_METRICS = ("BLEU", "chrF++", "TER", "ROUGE-L", "NIST", "CIDEr")


def evaluate_all(candidates, reference_sets, metrics: Sequence[str] = ALL_METRICS) -> MetricReport:
    """Compute the requested metrics; CIDEr is skipped (recorded absent) on one-document corpora."""
    fns = {"BLEU": corpus_bleu, "chrF++": chrf_pp, "TER": ter, "ROUGE-L": rouge_l, "NIST": nist, "CIDEr": cider}
    report = MetricReport(candidate_count=len(candidates))
    for m in metrics:
        if m == "CIDEr" and len(reference_sets) < 2:
            report.absent.append(m)
            continue
        report.scores[m] = float(fns[m](candidates, reference_sets))
    return report


def external_scores(path) -> MetricReport:
    """Read ``{"metric": score, ...}`` produced by an external scorer.

    A missing file yields an empty report that lists ``path`` as absent.
    """
    path = Path(path)
    if not path.exists():
        return MetricReport(absent=[str(path)])
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a JSON object of metric -> score")
    scores = {}
    for k, v in doc.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ParseError(f"{path}: metric {k!r} has non-numeric value {v!r}")
        scores[k] = float(v)
    return MetricReport(scores=scores, external=set(scores))
