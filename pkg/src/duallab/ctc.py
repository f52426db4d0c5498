"""CTC loss with analytic gradients, greedy decoding, and an enumeration oracle.

The blank token sits at vocabulary index 0.  All recursions run in log space;
a large finite negative stands in for log(0) so masked lattice states never
produce NaNs.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import tape

BLANK = 0
_NEG = -1.0e30  # effectively log(0) in float64 log-add-exp


class CtcError(ValueError):
    pass


def collapse(path) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for s in path:
        if s != prev and s != BLANK:
            out.append(int(s))
        prev = s
    return out


def count_repeats(target) -> int:
    return sum(1 for a, b in zip(target, target[1:]) if a == b)


def is_feasible(target, num_frames: int) -> bool:
    return num_frames >= len(target) + count_repeats(target)


def _extended(target) -> np.ndarray:
    """Blank-interleaved label sequence: blank t1 blank t2 ... blank."""
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_loss_batch(log_probs: np.ndarray, targets, frame_lengths=None,
                   with_grad: bool = True):
    """Forward-backward over a padded batch.

    log_probs: (B, K_max, V); targets: list of int sequences without blanks;
    frame_lengths: per-item frame counts (default K_max).  Returns
    (losses (B,), grads (B, K_max, V)) where grads are exact derivatives of
    each item's loss w.r.t. its log-probabilities (None with_grad=False).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 3:
        raise CtcError(f"expected (B, K, V) log-probs, got {lp.shape}")
    n_batch, k_max, n_vocab = lp.shape
    if frame_lengths is None:
        frame_lengths = [k_max] * n_batch
    frame_lengths = np.asarray(frame_lengths, dtype=np.int64)

    lengths = np.asarray([len(t) for t in targets], dtype=np.int64)
    for t, k in zip(targets, frame_lengths):
        if any(s == BLANK for s in t):
            raise CtcError("blank token inside target")
        if any(not 0 <= s < n_vocab for s in t):
            raise CtcError("target token outside vocabulary")
        if not is_feasible(t, int(k)):
            raise CtcError(f"target of length {len(t)} (+{count_repeats(t)} repeats) "
                           f"infeasible in {int(k)} frames")

    ext_len = 2 * lengths + 1
    s_max = int(ext_len.max())
    labels = np.zeros((n_batch, s_max), dtype=np.int64)
    for b, t in enumerate(targets):
        labels[b, :ext_len[b]] = _extended(t)
    valid = np.arange(s_max)[None, :] < ext_len[:, None]

    # a state may receive from s-2 when its label is non-blank and differs
    # from the label two back
    allow_skip = np.zeros((n_batch, s_max), dtype=bool)
    allow_skip[:, 2:] = (labels[:, 2:] != BLANK) & (labels[:, 2:] != labels[:, :-2])
    allow_skip &= valid

    # per-frame log prob of each lattice state's label
    lp_lab = np.take_along_axis(lp, labels[:, None, :].repeat(k_max, axis=1), axis=2)
    lp_lab = np.where(valid[:, None, :], lp_lab, _NEG)  # (B, K, S)

    alpha = np.full((n_batch, k_max, s_max), _NEG)
    a = np.full((n_batch, s_max), _NEG)
    a[:, 0] = lp_lab[:, 0, 0]
    has_label = lengths > 0
    if s_max > 1:
        a[has_label, 1] = lp_lab[has_label, 0, 1]
    alpha[:, 0] = a
    pad2 = np.full((n_batch, 2), _NEG)
    for t in range(1, k_max):
        shift1 = np.concatenate([pad2[:, :1], a], axis=1)[:, :s_max]
        shift2 = np.concatenate([pad2, a], axis=1)[:, :s_max]
        shift2 = np.where(allow_skip, shift2, _NEG)
        new = np.logaddexp(np.logaddexp(a, shift1), shift2) + lp_lab[:, t]
        live = (t < frame_lengths)[:, None]
        a = np.where(live, new, a)
        alpha[:, t] = a

    rows = np.arange(n_batch)
    last_t = frame_lengths - 1
    if not with_grad:
        log_p = np.logaddexp(
            alpha[rows, last_t, ext_len - 1],
            np.where(has_label, alpha[rows, last_t, np.maximum(ext_len - 2, 0)], _NEG))
        return -log_p, None

    beta = np.full((n_batch, k_max, s_max), _NEG)
    b_ = np.full((n_batch, s_max), _NEG)
    b_[rows, ext_len - 1] = lp_lab[rows, last_t, ext_len - 1]
    if s_max > 1:
        b_[rows[has_label], ext_len[has_label] - 2] = \
            lp_lab[rows[has_label], last_t[has_label], ext_len[has_label] - 2]
    beta[rows, last_t] = b_
    skip_fwd = np.zeros((n_batch, s_max), dtype=bool)
    if s_max > 2:
        skip_fwd[:, :-2] = allow_skip[:, 2:]
    for t in range(k_max - 2, -1, -1):
        shift1 = np.concatenate([b_, pad2], axis=1)[:, 1:s_max + 1]
        shift2 = np.concatenate([b_, pad2], axis=1)[:, 2:s_max + 2]
        shift2 = np.where(skip_fwd, shift2, _NEG)
        new = np.logaddexp(np.logaddexp(b_, shift1), shift2) + lp_lab[:, t]
        live = (t < frame_lengths - 1)[:, None]
        b_ = np.where(live, new, b_)
        beta[:, t] = np.where(live, new, beta[:, t])

    log_p = np.logaddexp(alpha[rows, last_t, ext_len - 1],
                         np.where(has_label, alpha[rows, last_t, np.maximum(ext_len - 2, 0)], _NEG))
    losses = -log_p

    # gamma = alpha + beta - lp_lab counts each path through (t, s) once
    gamma = alpha + beta - lp_lab
    frame_live = np.arange(k_max)[None, :, None] < frame_lengths[:, None, None]
    weight = np.exp(np.where(frame_live & valid[:, None, :],
                             gamma - log_p[:, None, None], _NEG))
    grads = np.zeros_like(lp)
    flat = grads.reshape(n_batch * k_max, n_vocab)
    row_idx = (np.arange(n_batch)[:, None, None] * k_max
               + np.arange(k_max)[None, :, None])
    np.add.at(flat, (np.broadcast_to(row_idx, weight.shape).ravel(),
                     np.broadcast_to(labels[:, None, :], weight.shape).ravel()),
              weight.ravel())
    grads = -flat.reshape(n_batch, k_max, n_vocab)
    return losses, grads


def ctc_loss(log_probs, target):
    """Loss -ln p(target | frames) and its gradient for one utterance.

    log_probs: (K, V) with blank at index 0; target: token ids without blanks.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise CtcError(f"expected (K, V) log-probs, got {lp.shape}")
    losses, grads = ctc_loss_batch(lp[None], [list(target)])
    return float(losses[0]), grads[0]


def ctc_loss_tensor(log_probs: tape.Tensor, targets, frame_lengths=None) -> tape.Tensor:
    """Batch-mean CTC loss as a tape op; backward uses the analytic gradient."""
    losses, grads = ctc_loss_batch(log_probs.data, targets, frame_lengths)
    mean = losses.mean()

    def backward(g):
        return [g * grads / len(losses)]

    return tape.apply_custom("ctc", np.asarray(mean), [log_probs], backward)


def ctc_greedy_decode(log_probs) -> list[int]:
    """Best path decode: per-frame argmax, merge repeats, drop blanks."""
    lp = np.asarray(log_probs)
    return collapse(lp.argmax(axis=-1))


def ctc_viterbi_labels(log_probs, target) -> np.ndarray:
    """Most likely framewise labels conditioned on emitting `target`.

    Viterbi over the blank-interleaved lattice; the returned length-K label
    sequence collapses exactly to `target`.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    k = lp.shape[0]
    if any(s == BLANK for s in target):
        raise CtcError("blank token inside target")
    if not is_feasible(target, k):
        raise CtcError("target infeasible for frame count")
    ext = _extended(target)
    s = len(ext)
    allow = np.zeros(s, dtype=bool)
    allow[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    delta = np.full((k, s), _NEG)
    back = np.zeros((k, s), dtype=np.int8)
    delta[0, 0] = lp[0, ext[0]]
    if s > 1:
        delta[0, 1] = lp[0, ext[1]]
    for t in range(1, k):
        stay = delta[t - 1]
        step = np.concatenate([[_NEG], delta[t - 1, :-1]])
        skip = np.concatenate([[_NEG, _NEG], delta[t - 1, :-2]])
        skip = np.where(allow, skip, _NEG)
        choice = np.argmax(np.stack([stay, step, skip]), axis=0)
        best = np.maximum(np.maximum(stay, step), skip)
        delta[t] = best + lp[t, ext]
        back[t] = choice
    s_end = s - 1
    if s > 1 and delta[k - 1, s - 2] > delta[k - 1, s - 1]:
        s_end = s - 2
    states = np.empty(k, dtype=np.int64)
    cur = s_end
    for t in range(k - 1, -1, -1):
        states[t] = cur
        cur -= back[t, cur]
    return ext[states]


def ctc_brute_force(probs, target, budget: int = 10_000_000) -> float:
    """Total probability of `target` by literal enumeration of all V^K paths."""
    p = np.asarray(probs, dtype=np.float64)
    k, v = p.shape
    if v ** k > budget:
        raise CtcError(f"enumeration of {v}^{k} paths exceeds budget")
    paths = np.fromiter(itertools.chain.from_iterable(
        itertools.product(range(v), repeat=k)), dtype=np.int64).reshape(-1, k)
    products = p[np.arange(k)[None, :], paths].prod(axis=1)
    want = list(target)
    total = 0.0
    for row, prod in zip(paths, products):
        if collapse(row) == want:
            total += prod
    return float(total)
