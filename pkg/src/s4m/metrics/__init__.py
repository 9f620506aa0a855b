from .caption import bleu, bleu_all, cider, corpus_rouge_l, rouge_l
from .probe import ProbeResult, alignment_score, linear_probe
from .report import EvalReport, evaluate_reports, score_corpus

__all__ = [
    "bleu", "bleu_all", "cider", "corpus_rouge_l", "rouge_l",
    "ProbeResult", "alignment_score", "linear_probe",
    "EvalReport", "evaluate_reports", "score_corpus",
]
