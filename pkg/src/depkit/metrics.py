"""Built-in scoring functions: accuracy, exact match, and token-level F1.

All three share one normalization pipeline (lowercase, punctuation strip,
article strip, whitespace collapse), each step individually switchable per
metric binding. Tokenization is whitespace split after normalization, so
scores are deterministic across environments.
"""

import logging
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

logger = logging.getLogger(__name__)

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

Golds = Union[str, Sequence[str], set, frozenset]


@dataclass(frozen=True)
class NormalizationSpec:
    """Which normalization steps to apply before comparing strings.

    normalize() is idempotent for every flag combination.
    """

    lowercase: bool = True
    strip_punctuation: bool = True
    collapse_whitespace: bool = True
    strip_articles: bool = True

    @classmethod
    def from_overrides(cls, overrides: dict) -> "NormalizationSpec":
        unknown = set(overrides) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown normalization flags: {sorted(unknown)}")
        return cls(**overrides)


DEFAULT_NORMALIZATION = NormalizationSpec()


def normalize(text: str, norm: NormalizationSpec = DEFAULT_NORMALIZATION) -> str:
    if norm.lowercase:
        text = text.lower()
    if norm.strip_punctuation:
        text = text.translate(_PUNCT_TABLE)
    if norm.strip_articles:
        text = _ARTICLES_RE.sub(" ", text)
    if norm.collapse_whitespace:
        text = " ".join(text.split())
    return text


def _gold_list(gold: Golds) -> list:
    if isinstance(gold, str):
        return [gold]
    return list(gold)


# ---------------------------------------------------------------------------
# Per-pair scorers (used by both the list-level metrics and the evaluator)


def accuracy_pair(prediction: str, gold: Golds, norm: NormalizationSpec = DEFAULT_NORMALIZATION) -> float:
    pred = normalize(prediction, norm)
    return 1.0 if any(pred == normalize(g, norm) for g in _gold_list(gold)) else 0.0


def exact_match_pair(prediction: str, gold: Golds, norm: NormalizationSpec = DEFAULT_NORMALIZATION) -> float:
    return accuracy_pair(prediction, gold, norm)


def token_f1_pair(prediction: str, gold: Golds, norm: NormalizationSpec = DEFAULT_NORMALIZATION) -> float:
    """Best token-multiset F1 of the prediction against any acceptable gold."""
    pred_tokens = normalize(prediction, norm).split()
    best = 0.0
    for g in _gold_list(gold):
        gold_tokens = normalize(g, norm).split()
        best = max(best, _f1_from_tokens(pred_tokens, gold_tokens))
        if best == 1.0:
            break
    return best


def _f1_from_tokens(pred_tokens: list, gold_tokens: list) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# List-level metrics


def _mean(scores: list, metric: str) -> float:
    if not scores:
        logger.warning("%s computed over no samples; reporting 0", metric)
        return 0.0
    return sum(scores) / len(scores)


def accuracy(pairs: Iterable, norm: NormalizationSpec = DEFAULT_NORMALIZATION) -> float:
    """Mean indicator of normalized equality over (prediction, gold) pairs."""
    return _mean([accuracy_pair(p, g, norm) for p, g in pairs], "accuracy")


def exact_match(pairs: Iterable, norm: NormalizationSpec = DEFAULT_NORMALIZATION) -> float:
    """Like accuracy, but gold may be a set of acceptable answers."""
    return _mean([exact_match_pair(p, g, norm) for p, g in pairs], "exact_match")


def token_f1(pairs: Iterable, norm: NormalizationSpec = DEFAULT_NORMALIZATION) -> float:
    """Mean token-multiset F1; with multiple golds the best match counts."""
    return _mean([token_f1_pair(p, g, norm) for p, g in pairs], "token_f1")


#: name -> (list-level metric, per-pair scorer), as referenced by dataset cards
BUILTIN_METRICS = {
    "acc": (accuracy, accuracy_pair),
    "em": (exact_match, exact_match_pair),
    "f1": (token_f1, token_f1_pair),
}
