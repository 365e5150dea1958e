"""Corpus BLEU-1..4, ROUGE-L and run-level highlighting of hypothesis/reference overlap."""

from __future__ import annotations

import html
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from handslt.errors import ValidationError
from handslt.translator import tokenize


@dataclass
class CorpusPair:
    hypotheses: list[list[str]]
    references: list[list[str]]

    def __post_init__(self):
        if len(self.hypotheses) != len(self.references):
            raise ValidationError(
                f"{len(self.hypotheses)} hypotheses vs {len(self.references)} references"
            )

    @classmethod
    def from_texts(cls, hypotheses: Sequence[str], references: Sequence[str]) -> "CorpusPair":
        return cls([tokenize(h) for h in hypotheses], [tokenize(r) for r in references])

    def __len__(self) -> int:
        return len(self.hypotheses)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(corpus: CorpusPair, max_n: int = 4, smooth: bool = False) -> float:
    """Corpus-level BLEU-``max_n`` in ``[0, 100]`` with uniform weights.

    Without smoothing, a zero clipped precision at any order gives 0.  With
    ``smooth=True`` add-one smoothing is applied to orders ``n > 1``.
    """
    if not 1 <= max_n <= 4:
        raise ValidationError(f"max_n must be in [1, 4], got {max_n}")
    if len(corpus) == 0:
        raise ValidationError("cannot score an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(corpus.hypotheses, corpus.references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / max_n
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp: Sequence[str], ref: Sequence[str]) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(corpus: CorpusPair) -> float:
    """Mean per-pair LCS F1, scaled to ``[0, 100]``."""
    if len(corpus) == 0:
        raise ValidationError("cannot score an empty corpus")
    scores = [rouge_l_pair(h, r) for h, r in zip(corpus.hypotheses, corpus.references)]
    return 100.0 * sum(scores) / len(scores)


def score_report(hypotheses: Sequence[str], references: Sequence[str]) -> dict:
    corpus = CorpusPair.from_texts(hypotheses, references)
    report = {f"bleu{n}": bleu(corpus, n) for n in range(1, 5)}
    report["rouge_l"] = rouge_l(corpus)
    report["num_samples"] = len(corpus)
    return report


# ---------------------------------------------------------------------------
# highlighting
# ---------------------------------------------------------------------------


def _occurs(run: Sequence[str], ref: Sequence[str]) -> bool:
    n = len(run)
    return any(list(ref[i : i + n]) == list(run) for i in range(len(ref) - n + 1))


@dataclass
class HighlightedSentence:
    tokens: list[str]
    run_ids: list[int | None]  # index of the matched run covering each token, None if unmatched

    @property
    def marked(self) -> list[bool]:
        return [r is not None for r in self.run_ids]

    def runs(self) -> list[list[str]]:
        """Matched runs in hypothesis order (adjacent runs stay separate)."""
        out: dict[int, list[str]] = {}
        for tok, r in zip(self.tokens, self.run_ids):
            if r is not None:
                out.setdefault(r, []).append(tok)
        return list(out.values())

    def _render(self, open_tag: str, close_tag: str, escape) -> str:
        parts = []
        prev = None
        for tok, r in zip(self.tokens, self.run_ids):
            if r != prev:
                if prev is not None:
                    parts[-1] += close_tag
                tok_text = (open_tag if r is not None else "") + escape(tok)
            else:
                tok_text = escape(tok)
            parts.append(tok_text)
            prev = r
        if prev is not None:
            parts[-1] += close_tag
        return " ".join(parts)

    def to_text(self) -> str:
        return self._render("[", "]", lambda t: t)

    def to_html(self) -> str:
        return self._render('<span class="match">', "</span>", html.escape)


def highlight_diff(hypothesis: Sequence[str], reference: Sequence[str]) -> HighlightedSentence:
    """Mark, left to right, the longest hypothesis runs that occur contiguously in the reference."""
    hyp, ref = list(hypothesis), list(reference)
    run_ids: list[int | None] = [None] * len(hyp)
    i = run = 0
    while i < len(hyp):
        j = i
        while j < len(hyp) and _occurs(hyp[i : j + 1], ref):
            j += 1
        if j > i:
            run_ids[i:j] = [run] * (j - i)
            run += 1
            i = j
        else:
            i += 1
    return HighlightedSentence(hyp, run_ids)


def diff_gallery_html(records: Sequence[dict]) -> str:
    """Render ``{sample_id, hypothesis, reference}`` records as an HTML page."""
    rows = []
    for rec in records:
        hl = highlight_diff(tokenize(rec["hypothesis"]), tokenize(rec["reference"]))
        rows.append(
            "<tr><td>{}</td><td>{}</td><td>{}</td></tr>".format(
                html.escape(str(rec["sample_id"])), html.escape(rec["reference"]), hl.to_html()
            )
        )
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>translations</title>"
        "<style>.match{background:#b7e4b7}td{padding:4px 8px;border-bottom:1px solid #ddd}</style>"
        "</head><body><table>\n<tr><th>sample</th><th>reference</th><th>hypothesis</th></tr>\n"
        + "\n".join(rows)
        + "\n</table></body></html>\n"
    )
