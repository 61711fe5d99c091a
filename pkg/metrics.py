"""
Text-level evaluation: corpus BLEU, character accuracy and sequence accuracy.
"""
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from sacrebleu.metrics import BLEU

BLEU_TOKENIZATION = "whitespace"
BLEU_SMOOTHING = "floor: zero-match order -> 1 / (2 * hypothesis n-gram count)"


@dataclass
class EvalResult:
    """
    One metric over a corpus. ``exact`` keeps accuracies as fractions so
    counts never drift; BLEU leaves it None.
    """
    metric: str
    value: float
    support: int
    precisions: list = field(default_factory=list)
    brevity_penalty: float = None
    exact: Fraction = None
    details: dict = field(default_factory=dict)

    def to_dict(self):
        data = asdict(self)
        data["exact"] = None if self.exact is None else f"{self.exact.numerator}/{self.exact.denominator}"
        return data


def _check_corpus(hyps, refs):
    if len(hyps) != len(refs):
        raise ValueError(f"hypothesis count {len(hyps)} differs from reference count {len(refs)}")
    if not hyps:
        raise ValueError("empty corpus")


def corpus_bleu(hyps, refs, max_n=4):
    """
    Corpus BLEU on whitespace tokens with uniform weights. Clipped n-gram
    counts come from sacrebleu; an order with matches gets precision
    count/total, an order without matches is floored at 1/(2*total), an order
    with no hypothesis n-grams at all is skipped. No unigram match gives 0.
    """
    _check_corpus(hyps, refs)
    scorer = BLEU(tokenize="none", smooth_method="none", max_ngram_order=max_n, effective_order=False)
    stats = scorer.corpus_score([" ".join(h.split()) for h in hyps], [[" ".join(r.split()) for r in refs]])
    counts, totals = list(stats.counts[:max_n]), list(stats.totals[:max_n])
    sys_len, ref_len = stats.sys_len, stats.ref_len

    precisions, floored = [], []
    for n, (count, total) in enumerate(zip(counts, totals), start=1):
        if total == 0:
            continue
        if count == 0:
            floored.append(n)
            precisions.append(1.0 / (2 * total))
        else:
            precisions.append(count / total)

    if sys_len == 0:
        bp = 0.0
    elif sys_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / sys_len)

    if not counts or counts[0] == 0 or not precisions:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / len(precisions))
    return EvalResult(
        metric="bleu", value=min(max(score, 0.0), 100.0), support=len(hyps), precisions=precisions,
        brevity_penalty=bp,
        details={"tokenization": BLEU_TOKENIZATION, "smoothing": BLEU_SMOOTHING, "max_n": max_n,
                 "floored_orders": floored, "counts": counts, "totals": totals,
                 "sys_len": sys_len, "ref_len": ref_len})


def char_accuracy(hyps, refs):
    """
    Positional character matches over the corpus; positions past the shorter
    of each pair count as wrong.
    """
    _check_corpus(hyps, refs)
    hits = total = 0
    for hyp, ref in zip(hyps, refs):
        hits += sum(a == b for a, b in zip(hyp, ref))
        total += max(len(hyp), len(ref))
    exact = Fraction(hits, total) if total else Fraction(1)
    return EvalResult(metric="char_accuracy", value=float(exact), support=len(hyps), exact=exact,
                      details={"matches": hits, "positions": total})


def sequence_accuracy(hyps, refs):
    _check_corpus(hyps, refs)
    exact = Fraction(sum(h == r for h, r in zip(hyps, refs)), len(hyps))
    return EvalResult(metric="sequence_accuracy", value=float(exact), support=len(hyps), exact=exact)


def evaluate_all(hyps, refs, max_n=4):
    """BLEU, character accuracy and sequence accuracy of one corpus."""
    return [corpus_bleu(hyps, refs, max_n), char_accuracy(hyps, refs), sequence_accuracy(hyps, refs)]
