"""Evaluation metrics: edit distance, token/word error rates, L1, PSNR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SILENCE_TOKENS = ("<#>", "<$>")
SPACE_TOKEN = "<sp>"

PSNR_CAP = 99.0


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref = list(ref)
    hyp = list(hyp)
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def strip_silence(tokens) -> list:
    return [t for t in tokens if t not in SILENCE_TOKENS]


def _as_tokens(text) -> list:
    return list(text) if isinstance(text, str) else list(text)


def _as_words(text) -> list[str]:
    if isinstance(text, str):
        return text.split()
    words: list[str] = []
    current: list[str] = []
    for tok in strip_silence(text):
        if tok == SPACE_TOKEN:
            if current:
                words.append("".join(current))
                current = []
        else:
            current.append(tok)
    if current:
        words.append("".join(current))
    return words


def cer(ref, hyp) -> float:
    """Edit distance over tokens divided by reference length, silence stripped."""
    r = strip_silence(_as_tokens(ref))
    h = strip_silence(_as_tokens(hyp))
    if not r:
        raise ValueError("empty reference")
    return edit_distance(r, h) / len(r)


def wer(ref, hyp) -> float:
    r = _as_words(ref)
    h = _as_words(hyp)
    if not r:
        raise ValueError("empty reference")
    return edit_distance(r, h) / len(r)


def corpus_error_rate(pairs, words: bool = False) -> float:
    """Total edit distance over total reference length for (ref, hyp) pairs."""
    errors = 0
    total = 0
    for ref, hyp in pairs:
        if words:
            r, h = _as_words(ref), _as_words(hyp)
        else:
            r, h = strip_silence(_as_tokens(ref)), strip_silence(_as_tokens(hyp))
        errors += edit_distance(r, h)
        total += len(r)
    if total == 0:
        raise ValueError("empty reference corpus")
    return errors / total


def psnr_trace(ref, hyp) -> float:
    """10*log10(1 / MSE) with peak 1.0; capped at 99.0 when MSE < 1e-10."""
    r = np.asarray(ref, dtype=np.float64)
    h = np.asarray(hyp, dtype=np.float64)
    if r.shape != h.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {h.shape}")
    mse = float(((r - h) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


@dataclass
class EvalReport:
    cer: float
    wer: float          # NaN in phoneme mode, where words are undefined
    mean_l1: float
    mean_psnr: float
    n_utterances: int

    CSV_HEADER = "cer,wer,mean_l1,mean_psnr,n_utterances"

    def csv_row(self) -> str:
        wer_s = "" if np.isnan(self.wer) else repr(float(self.wer))
        return (f"{float(self.cer)!r},{wer_s},{float(self.mean_l1)!r},"
                f"{float(self.mean_psnr)!r},{self.n_utterances}")

    def table(self) -> str:
        rows = [("utterances", f"{self.n_utterances}"),
                ("CER", f"{100 * self.cer:.2f}%"),
                ("WER", "-" if np.isnan(self.wer) else f"{100 * self.wer:.2f}%"),
                ("mean L1", f"{self.mean_l1:.5f}"),
                ("mean PSNR", f"{self.mean_psnr:.2f} dB")]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)
