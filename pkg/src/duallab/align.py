"""Token/frame alignment helpers: expansion by duration, duration extraction
from attention matrices, and monotonicity diagnostics."""

from __future__ import annotations

import numpy as np


def expand(tokens, durations) -> list:
    """Repeat tokens[i] durations[i] times, preserving order."""
    if len(tokens) != len(durations):
        raise ValueError(f"{len(tokens)} tokens vs {len(durations)} durations")
    out = []
    for tok, d in zip(tokens, durations):
        d = int(d)
        if d < 1:
            raise ValueError(f"duration {d} for token {tok!r} must be >= 1")
        out.extend([tok] * d)
    return out


def extract_durations(alignment) -> np.ndarray:
    """d_i = number of frame columns whose argmax row is i; sums to K exactly.

    Ties go to the lowest row index.  Zeros are legal: a skipped token simply
    owns no frames.
    """
    a = np.asarray(alignment)
    rows, cols = a.shape
    winners = a.argmax(axis=0)
    return np.bincount(winners, minlength=rows).astype(np.int64)


def monotonicity(alignment):
    """(is_monotone, descent_count) of the per-column argmax path."""
    a = np.asarray(alignment)
    path = a.argmax(axis=0)
    violations = int((np.diff(path) < 0).sum())
    return violations == 0, violations


def one_hot_alignment(durations) -> np.ndarray:
    """Exact alignment matrix for a duration sequence; column k is one-hot on
    the token active at frame k."""
    d = np.asarray(durations, dtype=np.int64)
    if (d < 1).any():
        raise ValueError("durations must be >= 1")
    frames = int(d.sum())
    out = np.zeros((len(d), frames))
    owner = np.repeat(np.arange(len(d)), d)
    out[owner, np.arange(frames)] = 1.0
    return out


def format_durations_line(tokens, durations) -> str:
    """One sentence as space-separated token:count pairs."""
    if len(tokens) != len(durations):
        raise ValueError("token/duration length mismatch")
    return " ".join(f"{tok}:{int(d)}" for tok, d in zip(tokens, durations))


def write_durations_file(path, sentences) -> None:
    """`sentences` yields (tokens, durations) pairs; one line per sentence."""
    with open(path, "w") as f:
        for tokens, durations in sentences:
            f.write(format_durations_line(tokens, durations) + "\n")
