"""Joint training: supervised steps on paired data, dual-transformation steps
on unpaired text and traces, Adam/AdamW updates, and the two-stage schedule.

One iteration = one supervised step plus (in stage 2) one dual step, followed
by a single optimizer update per model on the summed gradients.  Pseudo inputs
are generated with no active tape, so the producing model never receives
gradient from the consuming model's loss.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ctc, metrics
from .models import AttentionGenerator, DurationGenerator, ModelDims, Reader, save_models
from .synthdata import Corpus, derived_rng, sample_durations
from .tape import ComputationRecord, NonFiniteValue, Tensor, apply

CSV_HEADER = "epoch,stage,L_p_lg,L_p_lr,L_u_lg,L_u_lr,total,eval_cer,eval_wer,eval_l1,eval_psnr"


class TrainingAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    mode: str = "dual"              # baseline | dual
    generator: str = "duration"     # duration | attention
    alpha: float = 1.0
    total_epochs: int = 30
    stage1_epochs: int = 0          # 0 = switch on first eval-loss plateau
    batch_size: int = 16
    reader_lr: float = 0.005
    reader_decay: float = 0.5
    reader_weight_decay: float = 0.01
    gen_lr: float = 0.002
    gen_decay: float = 0.1
    plateau_patience: int = 3
    plateau_min_delta: float = 0.0001
    stop_loss_weight: float = 0.1
    unpaired_fraction: float = 1.0  # portion of the corpus available as unpaired
    max_frames: int = 90
    eval_subset: int = 160          # per-epoch eval size; 0 = full split every epoch
    conv_channels: int = 32
    conv_width: int = 5
    reader_hidden: int = 64
    reader_layers: int = 2
    embed_dim: int = 32
    gen_hidden: int = 64
    guide_dim: int = 32
    attn_dim: int = 64
    attn_filters: int = 8
    attn_kernel: int = 7

    def dims(self, vocab_size: int, channels: int) -> ModelDims:
        return ModelDims(vocab_size=vocab_size, channels=channels,
                         conv_channels=self.conv_channels, conv_width=self.conv_width,
                         reader_hidden=self.reader_hidden, reader_layers=self.reader_layers,
                         embed_dim=self.embed_dim, gen_hidden=self.gen_hidden,
                         guide_dim=self.guide_dim, attn_dim=self.attn_dim,
                         attn_filters=self.attn_filters, attn_kernel=self.attn_kernel)


@dataclass
class LossBreakdown:
    L_p_lg: float = 0.0
    L_p_lr: float = 0.0
    L_u_lg: float = 0.0
    L_u_lr: float = 0.0

    def total(self, alpha: float) -> float:
        return (self.L_p_lg + self.L_p_lr) + alpha * (self.L_u_lg + self.L_u_lr)

    def add(self, other: "LossBreakdown", weight: float = 1.0):
        self.L_p_lg += weight * other.L_p_lg
        self.L_p_lr += weight * other.L_p_lr
        self.L_u_lg += weight * other.L_u_lg
        self.L_u_lr += weight * other.L_u_lr


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8, weight_decay: float = 0.0):
    """One in-place Adam update with bias correction; decay is decoupled."""
    if not np.isfinite(grad).all():
        raise TrainingAbort("non-finite gradient")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        param -= lr * weight_decay * param


class Adam:
    """Adam over a ParamStore; with weight_decay > 0 this is AdamW."""

    def __init__(self, store, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p) for k, p in store.params.items()}
        self.v = {k: np.zeros_like(p) for k, p in store.params.items()}

    def step(self):
        self.step_count += 1
        for name, param in self.store.params.items():
            adam_update(param, self.store.grads[name], self.m[name], self.v[name],
                        self.step_count, self.lr, self.beta1, self.beta2,
                        self.eps, self.weight_decay)

    def decay_lr(self, ratio: float):
        self.lr *= ratio


def frame_labels_to_durations(frame_ids):
    """Run-length encode framewise labels into (tokens, durations).

    Blank runs fold into the preceding token (leading blanks into the first
    token), so durations sum to the frame count and tokens match the greedy
    decode of the frame labels.  Returns None when everything is blank.
    """
    runs: list[list[int]] = []  # [token, length]
    for t in frame_ids:
        t = int(t)
        if runs and runs[-1][0] == t:
            runs[-1][1] += 1
        else:
            runs.append([t, 1])
    merged: list[list[int]] = []
    pending = 0
    for tok, length in runs:
        if tok == ctc.BLANK:
            if merged:
                merged[-1][1] += length
            else:
                pending += length
        else:
            merged.append([tok, length + pending])
            pending = 0
    if not merged:
        return None
    if pending:  # fully blank tail after no token: impossible here, kept for safety
        merged[-1][1] += pending
    tokens = [tok for tok, _ in merged]
    durations = [length for _, length in merged]
    return tokens, durations


def _group_by(items, key):
    groups: dict = {}
    for it in items:
        groups.setdefault(key(it), []).append(it)
    return [groups[k] for k in sorted(groups)]


def load_split_items(corpus: Corpus, tag: str, with_text: bool = True) -> list[dict]:
    """Materialize a manifest split into training items (traces in float64)."""
    out = []
    for e in corpus.split(tag):
        item = {"id": e["id"], "speaker": e["speaker"]}
        if with_text:
            item["tokens"] = corpus.vocab.encode(corpus.tokens_for(e))
            item["durations"] = e["durations"]
        if e["trace"]:
            item["trace"] = corpus.load_trace(e).astype(np.float64)
        out.append(item)
    return out


class Trainer:
    def __init__(self, cfg: TrainConfig, corpus: Corpus, out_dir: str):
        if cfg.mode not in ("baseline", "dual"):
            raise ValueError(f"unknown mode {cfg.mode!r}")
        if cfg.generator not in ("duration", "attention"):
            raise ValueError(f"unknown generator {cfg.generator!r}")
        self.cfg = cfg
        self.corpus = corpus
        self.out_dir = out_dir
        self.vocab = corpus.vocab
        os.makedirs(out_dir, exist_ok=True)

        self.paired = load_split_items(corpus, "paired")
        self.eval_set = load_split_items(corpus, "eval")
        # fixed subset for cheap per-epoch tracking; final metrics use the full split
        if 0 < cfg.eval_subset < len(self.eval_set):
            order = np.arange(len(self.eval_set))
            derived_rng(cfg.seed, "eval_subset").shuffle(order)
            self.eval_subset = [self.eval_set[i] for i in order[:cfg.eval_subset]]
        else:
            self.eval_subset = self.eval_set
        text_pool = [{"tokens": self.vocab.encode(corpus.tokens_for(e))}
                     for e in corpus.split("text_only")]
        lip_pool = load_split_items(corpus, "lip_only", with_text=False)
        self.text_pool = self._subset(text_pool, "text_subset")
        self.lip_pool = self._subset(lip_pool, "lip_subset")

        dims = cfg.dims(len(self.vocab), corpus.config.channels)
        self.dims = dims
        self.reader = Reader(dims, derived_rng(cfg.seed, "reader").integers(2 ** 62))
        gen_cls = DurationGenerator if cfg.generator == "duration" else AttentionGenerator
        self.generator = gen_cls(dims, derived_rng(cfg.seed, "generator").integers(2 ** 62))
        self.reader_opt = Adam(self.reader.store, cfg.reader_lr,
                               weight_decay=cfg.reader_weight_decay)
        self.gen_opt = Adam(self.generator.store, cfg.gen_lr)

        self.order_rng = derived_rng(cfg.seed, "order")
        self.guide_rng = derived_rng(cfg.seed, "guide")
        self.dur_rng = derived_rng(cfg.seed, "pseudo_durations")
        self.unpaired_rng = derived_rng(cfg.seed, "unpaired")
        self.stage = 1
        self.stage_switch_epoch = None
        self.skipped_pseudo = 0
        self.eval_length_mismatches = 0
        self._best_params = None
        self.dual_active = (cfg.mode == "dual" and cfg.alpha > 0
                            and self.text_pool and self.lip_pool)

    # ------------------------------------------------------------------ data

    def _subset(self, pool, label):
        """Deterministic nested subset of an unpaired pool."""
        frac = self.cfg.unpaired_fraction
        non_eval = len(self.corpus.entries) - len(self.corpus.split("eval"))
        want_total = int(round(frac * non_eval))
        want = min(len(pool), want_total // 2)
        if frac >= 1.0:
            want = len(pool)
        order = np.arange(len(pool))
        derived_rng(self.cfg.seed, label).shuffle(order)
        return [pool[i] for i in order[:want]]

    def _sample_batch(self, pool):
        n = min(self.cfg.batch_size, len(pool))
        idx = self.unpaired_rng.choice(len(pool), size=n, replace=False)
        return [pool[i] for i in idx]

    def _guide_from(self, trace) -> np.ndarray:
        return trace[self.guide_rng.integers(trace.shape[0])]

    def _random_lip_guide(self) -> np.ndarray:
        donor = self.lip_pool[self.unpaired_rng.integers(len(self.lip_pool))]
        return self._guide_from(donor["trace"])

    # ----------------------------------------------------------------- steps

    def _reader_loss_on(self, items, scale: float) -> float:
        """CTC-train the reader on (trace, tokens) items; returns mean loss."""
        total = 0.0
        n = len(items)
        for group in _group_by(items, key=lambda it: it["trace"].shape[0]):
            traces = np.stack([it["trace"] for it in group])
            targets = [it["tokens"] for it in group]
            with ComputationRecord() as rec:
                bound = self.reader.bind(rec)
                log_probs = self.reader.forward(bound, traces)
                loss = ctc.ctc_loss_tensor(log_probs, targets)
                grads = rec.backward(loss)
            weight = len(group) / n
            self.reader.store.accumulate(bound, grads, scale * weight)
            total += weight * loss.item()
        return total

    def _gen_dur_loss_on(self, items, scale: float) -> float:
        """L1-train the duration generator on (tokens, durations, trace, guide)."""
        total = 0.0
        n = len(items)
        for group in _group_by(items, key=lambda it: it["trace"].shape[0]):
            ids = np.stack([np.repeat(it["tokens"], it["durations"]) for it in group])
            guides = np.stack([it["guide"] for it in group])
            target = np.stack([it["trace"] for it in group])
            with ComputationRecord() as rec:
                bound = self.generator.bind(rec)
                frames = self.generator.forward(bound, ids, guides)
                loss = apply("l1_distance", frames, Tensor(target))
                grads = rec.backward(loss)
            weight = len(group) / n
            self.generator.store.accumulate(bound, grads, scale * weight)
            total += weight * loss.item()
        return total

    def _gen_attn_loss_on(self, items, scale: float) -> float:
        """Teacher-forced training of the attention generator; returns L1 part."""
        total = 0.0
        n = len(items)
        stop_w = self.cfg.stop_loss_weight
        for group in _group_by(items, key=lambda it: it["trace"].shape[0]):
            lengths = [len(it["tokens"]) for it in group]
            t_max = max(lengths)
            ids = np.zeros((len(group), t_max), dtype=np.int64)
            for row, it in enumerate(group):
                ids[row, :len(it["tokens"])] = it["tokens"]
            guides = np.stack([it["guide"] for it in group])
            target = np.stack([it["trace"] for it in group])
            k = target.shape[1]
            stop_labels = np.zeros((len(group), k))
            stop_labels[:, -1] = 1.0
            with ComputationRecord() as rec:
                bound = self.generator.bind(rec)
                frames, _, stop_logits = self.generator.forward_teacher(
                    bound, ids, lengths, target, guides)
                l1 = apply("l1_distance", frames, Tensor(target))
                stop = apply("bce_logits", stop_logits, targets=stop_labels)
                loss = apply("add", l1, apply("mul_elementwise", stop, stop_w))
                grads = rec.backward(loss)
            weight = len(group) / n
            self.generator.store.accumulate(bound, grads, scale * weight)
            total += weight * l1.item()
        return total

    def _gen_loss_on(self, items, scale: float) -> float:
        if self.cfg.generator == "duration":
            return self._gen_dur_loss_on(items, scale)
        return self._gen_attn_loss_on(items, scale)

    def supervised_step(self, batch) -> LossBreakdown:
        if not batch:
            raise ValueError("empty batch")
        for it in batch:
            it["guide"] = self._guide_from(it["trace"])
        out = LossBreakdown()
        out.L_p_lr = self._reader_loss_on(batch, scale=1.0)
        out.L_p_lg = self._gen_loss_on(batch, scale=1.0)
        return out

    def _pseudo_traces(self, text_batch):
        """Generate traces from unpaired text with gradients blocked."""
        items = []
        guides = [self._random_lip_guide() for _ in text_batch]
        if self.cfg.generator == "duration":
            prepared = []
            for it, guide in zip(text_batch, guides):
                tokens = self.vocab.decode(it["tokens"])
                durations = sample_durations(tokens, self.dur_rng, self.corpus.config)
                prepared.append({"tokens": it["tokens"], "guide": guide,
                                 "ids": np.repeat(it["tokens"], durations)})
            for group in _group_by(prepared, key=lambda it: len(it["ids"])):
                frames = self.generator.generate(np.stack([it["ids"] for it in group]),
                                                 np.stack([it["guide"] for it in group]))
                for row, it in enumerate(group):
                    items.append({"tokens": it["tokens"], "trace": frames[row]})
            return items
        lengths = [len(it["tokens"]) for it in text_batch]
        t_max = max(lengths)
        ids = np.zeros((len(text_batch), t_max), dtype=np.int64)
        for row, it in enumerate(text_batch):
            ids[row, :len(it["tokens"])] = it["tokens"]
        frames, _, out_len = self.generator.generate(
            ids, lengths, np.stack(guides), self.cfg.max_frames)
        for row, it in enumerate(text_batch):
            k = int(out_len[row])
            if not ctc.is_feasible(it["tokens"], k):
                self.skipped_pseudo += 1
                continue
            items.append({"tokens": it["tokens"], "trace": frames[row, :k]})
        return items

    def _pseudo_texts(self, lip_batch):
        """Decode unpaired traces into pseudo transcripts with durations.

        The transcript is the greedy decode; its durations come from the
        framewise labels of the Viterbi path forced to that transcript, which
        is far less boundary-biased than raw argmax runs.
        """
        items = []
        for group in _group_by(lip_batch, key=lambda it: it["trace"].shape[0]):
            traces = np.stack([it["trace"] for it in group])
            log_probs = self.reader.log_probs(traces)
            for row, it in enumerate(group):
                decoded = ctc.ctc_greedy_decode(log_probs[row])
                if not decoded:
                    self.skipped_pseudo += 1
                    continue
                framewise = ctc.ctc_viterbi_labels(log_probs[row], decoded)
                tokens, durations = frame_labels_to_durations(framewise)
                items.append({"tokens": tokens, "durations": durations,
                              "trace": it["trace"],
                              "guide": self._guide_from(it["trace"])})
        return items

    def dual_step(self, text_batch, lip_batch) -> LossBreakdown:
        """Train each model on pseudo pairs produced by the other one."""
        if not text_batch or not lip_batch:
            raise ValueError("empty unpaired batch")
        alpha = self.cfg.alpha
        out = LossBreakdown()
        pseudo_traces = self._pseudo_traces(text_batch)
        if len(pseudo_traces) * 2 >= len(text_batch):
            out.L_u_lr = self._reader_loss_on(pseudo_traces, scale=alpha)
        pseudo_texts = self._pseudo_texts(lip_batch)
        if len(pseudo_texts) * 2 >= len(lip_batch):
            out.L_u_lg = self._gen_loss_on(pseudo_texts, scale=alpha)
        return out

    # ------------------------------------------------------------------ eval

    def evaluate(self, full: bool = False) -> dict:
        items = self.eval_set if full else self.eval_subset
        stats, mismatches = evaluate_models(
            self.reader, self.generator, self.cfg.generator, items,
            self.vocab, self.corpus.config.unit, self.cfg.batch_size,
            self.cfg.max_frames)
        self.eval_length_mismatches += mismatches
        return stats

    # ------------------------------------------------------------------- run

    def run(self) -> dict:
        cfg = self.cfg
        csv_path = os.path.join(self.out_dir, "metrics.csv")
        rows = [CSV_HEADER]
        best = np.inf
        bad_epochs = 0
        reader_best = gen_best = np.inf
        reader_bad = gen_bad = 0
        ckpt_meta = {
            "dims": asdict(self.dims), "generator": cfg.generator,
            "tokens": self.vocab.tokens, "seed": cfg.seed, "mode": cfg.mode,
        }
        if cfg.mode == "dual" and not self.dual_active:
            print("warning: dual mode with no unpaired data; running as baseline")

        for epoch in range(1, cfg.total_epochs + 1):
            order = np.arange(len(self.paired))
            self.order_rng.shuffle(order)
            epoch_losses = LossBreakdown()
            n_iter = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [self.paired[i] for i in order[start:start + cfg.batch_size]]
                self.reader.store.zero_grads()
                self.generator.store.zero_grads()
                step_losses = self.supervised_step(batch)
                if self.stage == 2 and self.dual_active:
                    dual = self.dual_step(self._sample_batch(self.text_pool),
                                          self._sample_batch(self.lip_pool))
                    step_losses.add(dual)
                try:
                    self.reader_opt.step()
                    self.gen_opt.step()
                except TrainingAbort as exc:
                    raise TrainingAbort(f"epoch {epoch}: {exc}") from exc
                epoch_losses.add(step_losses)
                n_iter += 1
            epoch_losses = LossBreakdown(*(getattr(epoch_losses, f) / n_iter for f in
                                           ("L_p_lg", "L_p_lr", "L_u_lg", "L_u_lr")))
            stats = self.evaluate()
            rows.append(",".join([str(epoch), str(self.stage)] +
                                 [repr(float(x)) for x in
                                  (epoch_losses.L_p_lg, epoch_losses.L_p_lr,
                                   epoch_losses.L_u_lg, epoch_losses.L_u_lr,
                                   epoch_losses.total(cfg.alpha),
                                   stats["cer"], stats["wer"],
                                   stats["l1"], stats["psnr"])]))
            with open(csv_path, "w") as f:
                f.write("\n".join(rows) + "\n")

            if stats["objective"] < best - cfg.plateau_min_delta:
                best = stats["objective"]
                bad_epochs = 0
                save_models(self.reader, self.generator,
                            os.path.join(self.out_dir, "checkpoints", "best"),
                            {**ckpt_meta, "epoch": epoch, **stats})
                self._best_params = (
                    {k: v.copy() for k, v in self.reader.store.params.items()},
                    {k: v.copy() for k, v in self.generator.store.params.items()})
            else:
                bad_epochs += 1
            # each model decays on its own eval plateau; the first combined
            # plateau switches stages instead of decaying anything
            if stats["ctc"] < reader_best - cfg.plateau_min_delta:
                reader_best, reader_bad = stats["ctc"], 0
            else:
                reader_bad += 1
            if stats["l1"] < gen_best - cfg.plateau_min_delta:
                gen_best, gen_bad = stats["l1"], 0
            else:
                gen_bad += 1
            switch_now = (self.stage == 1 and self.dual_active
                          and (epoch == cfg.stage1_epochs
                               or (cfg.stage1_epochs == 0 and bad_epochs >= cfg.plateau_patience)))
            if switch_now:
                self.stage = 2
                self.stage_switch_epoch = epoch
                bad_epochs = reader_bad = gen_bad = 0
            elif self.stage == 2 or not self.dual_active:
                # dual runs hold both learning rates until the stage switch
                if reader_bad >= cfg.plateau_patience:
                    self.reader_opt.decay_lr(cfg.reader_decay)
                    reader_bad = 0
                if gen_bad >= cfg.plateau_patience:
                    self.gen_opt.decay_lr(cfg.gen_decay)
                    gen_bad = 0

        save_models(self.reader, self.generator,
                    os.path.join(self.out_dir, "checkpoints", "last"),
                    {**ckpt_meta, "epoch": cfg.total_epochs})
        # the retained model is the best-eval one; restore it for final outputs
        if self._best_params is not None:
            reader_params, gen_params = self._best_params
            self.reader.store.params.update(reader_params)
            self.generator.store.params.update(gen_params)
        final = self.evaluate(full=True)
        if cfg.generator == "attention":
            dump_eval_alignments(self.generator, self.eval_set, self.vocab,
                                 cfg.batch_size, cfg.max_frames,
                                 os.path.join(self.out_dir, "alignments.npz"))
        info = {
            "stage_switch_epoch": self.stage_switch_epoch,
            "skipped_pseudo": self.skipped_pseudo,
            "eval_length_mismatches": self.eval_length_mismatches,
            "final": final,
            "paired": len(self.paired), "text_only": len(self.text_pool),
            "lip_only": len(self.lip_pool), "eval": len(self.eval_set),
        }
        with open(os.path.join(self.out_dir, "run_info.json"), "w") as f:
            json.dump(info, f, indent=1, sort_keys=True)
        return info


def _fit_length(frames: np.ndarray, target_len: int) -> np.ndarray:
    """Truncate or last-frame-pad generated frames to the reference length."""
    k = frames.shape[0]
    if k == target_len:
        return frames
    if k > target_len:
        return frames[:target_len]
    pad = np.repeat(frames[-1:], target_len - k, axis=0)
    return np.concatenate([frames, pad], axis=0)


def _pad_token_batch(items):
    lengths = [len(it["tokens"]) for it in items]
    ids = np.zeros((len(items), max(lengths)), dtype=np.int64)
    for row, it in enumerate(items):
        ids[row, :len(it["tokens"])] = it["tokens"]
    return ids, lengths


def evaluate_models(reader, generator, gen_kind: str, eval_items, vocab,
                    unit: str, batch_size: int, max_frames: int):
    """Reader CER/WER and generator L1/PSNR over held-out items.

    Error rates are corpus-level (total edits over total reference length);
    the attention generator is scored in autoregressive inference mode with
    outputs fitted to the reference length.  Returns (stats, mismatch_count).
    """
    pairs = []
    ctc_losses = []
    for group in _group_by(eval_items, key=lambda it: it["trace"].shape[0]):
        traces = np.stack([it["trace"] for it in group])
        log_probs = reader.log_probs(traces)
        losses, _ = ctc.ctc_loss_batch(log_probs, [it["tokens"] for it in group],
                                       with_grad=False)
        ctc_losses.extend(losses.tolist())
        for row, it in enumerate(group):
            hyp = ctc.ctc_greedy_decode(log_probs[row])
            pairs.append((vocab.decode(it["tokens"]), vocab.decode(hyp)))
    cer = metrics.corpus_error_rate(pairs)
    wer = (metrics.corpus_error_rate(pairs, words=True)
           if unit == "char" else float("nan"))

    l1s, psnrs = [], []
    mismatches = 0
    if gen_kind == "duration":
        for group in _group_by(eval_items, key=lambda it: it["trace"].shape[0]):
            ids = np.stack([np.repeat(it["tokens"], it["durations"]) for it in group])
            guides = np.stack([it["trace"][0] for it in group])
            frames = generator.generate(ids, guides)
            for row, it in enumerate(group):
                l1s.append(float(np.abs(frames[row] - it["trace"]).mean()))
                psnrs.append(metrics.psnr_trace(it["trace"], frames[row]))
    else:
        for start in range(0, len(eval_items), batch_size):
            group = eval_items[start:start + batch_size]
            ids, lengths = _pad_token_batch(group)
            guides = np.stack([it["trace"][0] for it in group])
            frames, _, out_len = generator.generate(ids, lengths, guides, max_frames)
            for row, it in enumerate(group):
                ref = it["trace"]
                hyp = _fit_length(frames[row, :int(out_len[row])], ref.shape[0])
                if int(out_len[row]) != ref.shape[0]:
                    mismatches += 1
                l1s.append(float(np.abs(hyp - ref).mean()))
                psnrs.append(metrics.psnr_trace(ref, hyp))
    stats = {
        "cer": cer, "wer": wer,
        "l1": float(np.mean(l1s)), "psnr": float(np.mean(psnrs)),
        "ctc": float(np.mean(ctc_losses)),
        "objective": float(np.mean(ctc_losses)) + float(np.mean(l1s)),
    }
    return stats, mismatches


def dump_eval_alignments(generator: AttentionGenerator, eval_items, vocab,
                         batch_size: int, max_frames: int, path: str):
    """Write inference alignments for held-out sentences as an .npz archive.

    Each utterance id maps to its (T, K) alignment; `<id>/len` holds the
    generated frame count.
    """
    arrays = {}
    for start in range(0, len(eval_items), batch_size):
        group = eval_items[start:start + batch_size]
        ids, lengths = _pad_token_batch(group)
        guides = np.stack([it["trace"][0] for it in group])
        _, align, out_len = generator.generate(ids, lengths, guides, max_frames)
        for row, it in enumerate(group):
            t, k = len(it["tokens"]), int(out_len[row])
            arrays[it["id"]] = align[row, :t, :k]
            arrays[f"{it['id']}/len"] = np.asarray(k)
    np.savez_compressed(path, **arrays)


def train_run(cfg: TrainConfig, data_dir: str, out_dir: str) -> dict:
    corpus = Corpus(data_dir)
    trainer = Trainer(cfg, corpus, out_dir)
    try:
        return trainer.run()
    except NonFiniteValue as exc:
        raise TrainingAbort(str(exc)) from exc
