from .follower import FollowResult, follow, follow_corpus
from .metrics import (METRICS, CiderResult, MetricReport, bleu, cider, corpus_bleu, evaluate, lcs_length,
                      meteor_lite, rouge_l)

__all__ = [
    "METRICS", "CiderResult", "FollowResult", "MetricReport", "bleu", "cider", "corpus_bleu", "evaluate",
    "follow", "follow_corpus", "lcs_length", "meteor_lite", "rouge_l",
]
