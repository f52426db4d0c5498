"""The three trainable models: a CTC trace reader and two text-to-trace
generators (duration-expanded and attention-aligned).

Forward methods build tape graphs from a bound parameter dict; pass
`model.detached()` instead to run inference with no gradient bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ctc
from .layers import (bind_attention, bind_gru, gru_cell, init_attention,
                     init_gru, linear, location_sensitive_attention,
                     temporal_conv, uniform_init)
from .tape import ParamStore, Tensor, apply, concat


@dataclass
class ModelDims:
    vocab_size: int
    channels: int = 8
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


class _Model:
    def __init__(self, dims: ModelDims, seed: int):
        self.dims = dims
        self.store = ParamStore()
        self._build(np.random.default_rng(seed))

    def bind(self, record) -> dict:
        return self.store.bind(record)

    def detached(self) -> dict:
        return {k: Tensor(v) for k, v in self.store.params.items()}


def _init_linear(store, prefix, n_in, n_out, rng):
    store.add(f"{prefix}/w", uniform_init(rng, n_in, (n_in, n_out)))
    store.add(f"{prefix}/b", np.zeros(n_out))


def _linear(p, prefix, x):
    return linear(x, p[f"{prefix}/w"], p[f"{prefix}/b"])


def _guide_encode(p, guides) -> Tensor:
    """Condense a guide frame (B, D) into speaker features (B, G)."""
    h = apply("relu", _linear(p, "guide0", Tensor(np.asarray(guides))))
    return apply("relu", _linear(p, "guide1", h))


def _init_guide(store, dims, rng):
    _init_linear(store, "guide0", dims.channels, dims.guide_dim, rng)
    _init_linear(store, "guide1", dims.guide_dim, dims.guide_dim, rng)


class Reader(_Model):
    """Temporal conv stack + bidirectional GRU layers + linear to log-probs."""

    def _build(self, rng):
        d = self.dims
        store = self.store
        store.add("conv0/kernels",
                  uniform_init(rng, d.conv_width * d.channels,
                               (d.conv_width, d.channels, d.conv_channels)))
        store.add("conv0/bias", np.zeros(d.conv_channels))
        store.add("conv1/kernels",
                  uniform_init(rng, d.conv_width * d.conv_channels,
                               (d.conv_width, d.conv_channels, d.conv_channels)))
        store.add("conv1/bias", np.zeros(d.conv_channels))
        in_dim = d.conv_channels
        for layer in range(d.reader_layers):
            init_gru(store, f"gru{layer}f", in_dim, d.reader_hidden, rng)
            init_gru(store, f"gru{layer}b", in_dim, d.reader_hidden, rng)
            in_dim = 2 * d.reader_hidden
        _init_linear(store, "out", in_dim, d.vocab_size, rng)

    def forward(self, p: dict, traces) -> Tensor:
        """traces (B, K, D) -> per-frame log-probabilities (B, K, V)."""
        x = Tensor(np.asarray(traces))
        if x.ndim != 3 or x.shape[-1] != self.dims.channels:
            raise ValueError(f"expected (B, K, {self.dims.channels}) traces, got {x.shape}")
        from .layers import gru_sequence
        x = apply("relu", temporal_conv(x, p["conv0/kernels"], p["conv0/bias"]))
        x = apply("relu", temporal_conv(x, p["conv1/kernels"], p["conv1/bias"]))
        for layer in range(self.dims.reader_layers):
            x = gru_sequence(x, bind_gru(p, f"gru{layer}f"), bind_gru(p, f"gru{layer}b"))
        return apply("log_softmax_last_axis", _linear(p, "out", x))

    def log_probs(self, traces) -> np.ndarray:
        return self.forward(self.detached(), traces).data

    def decode(self, traces) -> list[list[int]]:
        """Greedy best-path decode of a length-matched batch."""
        lp = self.log_probs(traces)
        return [ctc.ctc_greedy_decode(lp[b]) for b in range(lp.shape[0])]


class DurationGenerator(_Model):
    """Duration-expanded text -> frames, conditioned on a guide frame.

    The unrolled token sequence goes through embedding + bidirectional GRU,
    guide features are concatenated at every step before a fusion GRU, and a
    linear stack with a final sigmoid emits frames in [0, 1].
    """

    def _build(self, rng):
        d = self.dims
        store = self.store
        half = d.gen_hidden // 2
        store.add("embed", uniform_init(rng, d.embed_dim, (d.vocab_size, d.embed_dim)))
        init_gru(store, "encf", d.embed_dim, half, rng)
        init_gru(store, "encb", d.embed_dim, half, rng)
        _init_guide(store, d, rng)
        init_gru(store, "fusion", 2 * half + d.guide_dim, d.gen_hidden, rng)
        _init_linear(store, "dec0", d.gen_hidden + d.guide_dim, d.gen_hidden, rng)
        _init_linear(store, "dec1", d.gen_hidden, d.channels, rng)

    def forward(self, p: dict, unrolled_ids, guides) -> Tensor:
        """unrolled_ids (B, K) int, guides (B, D) -> frames (B, K, D)."""
        from .layers import gru_sequence
        ids = np.asarray(unrolled_ids)
        batch, steps = ids.shape
        emb = apply("embed", p["embed"], ids=ids)                      # (B, K, E)
        enc = gru_sequence(emb, bind_gru(p, "encf"), bind_gru(p, "encb"))
        zi = _guide_encode(p, guides)                                  # (B, G)
        zi_k = apply("broadcast_axis", zi.reshape(batch, 1, -1), axis=1, reps=steps)
        fused = gru_sequence(concat([enc, zi_k], axis=-1), bind_gru(p, "fusion"))
        hidden = apply("relu", _linear(p, "dec0", concat([fused, zi_k], axis=-1)))
        return apply("sigmoid", _linear(p, "dec1", hidden))

    def generate(self, unrolled_ids, guides) -> np.ndarray:
        return self.forward(self.detached(), unrolled_ids, guides).data


class AttentionGenerator(_Model):
    """Autoregressive frame decoder with location-sensitive attention.

    The text encoder is unidirectional so right-padded batches stay pure per
    item; alignment lookahead comes from the attention itself.  Each decoder
    step consumes [previous frame, guide features, previous context], updates
    a GRU cell, attends with accumulated weights as location history, and
    projects a frame plus a stop logit.
    """

    def _build(self, rng):
        d = self.dims
        store = self.store
        store.add("embed", uniform_init(rng, d.embed_dim, (d.vocab_size, d.embed_dim)))
        init_gru(store, "enc", d.embed_dim, d.gen_hidden, rng)
        _init_guide(store, d, rng)
        dec_in = d.channels + d.guide_dim + d.gen_hidden
        init_gru(store, "dec", dec_in, d.gen_hidden, rng)
        init_attention(store, "attn", d.gen_hidden, d.gen_hidden,
                       d.attn_dim, d.attn_filters, d.attn_kernel, rng)
        _init_linear(store, "frame", 2 * d.gen_hidden, d.channels, rng)
        _init_linear(store, "stop", 2 * d.gen_hidden, 1, rng)

    def _memory(self, p, token_ids):
        from .layers import gru_sequence
        emb = apply("embed", p["embed"], ids=np.asarray(token_ids))
        return gru_sequence(emb, bind_gru(p, "enc"))                  # (B, T, M)

    @staticmethod
    def _score_mask(token_lengths, padded_len) -> np.ndarray | None:
        lengths = np.asarray(token_lengths)
        if (lengths == padded_len).all():
            return None
        mask = np.zeros((len(lengths), padded_len))
        mask[np.arange(padded_len)[None, :] >= lengths[:, None]] = -1e9
        return mask

    def _step(self, p, attn, memory, mask, prev_frame, zi, context, h, cum):
        x = concat([prev_frame, zi, context], axis=-1)
        h = gru_cell(x, h, bind_gru(p, "dec"))
        context, weights = location_sensitive_attention(h, memory, cum, attn, mask)
        cum = apply("add", cum, weights)
        out_in = concat([h, context], axis=-1)
        frame = apply("sigmoid", _linear(p, "frame", out_in))
        stop = _linear(p, "stop", out_in)
        return frame, stop, weights, context, h, cum

    def forward_teacher(self, p: dict, token_ids, token_lengths, teacher, guides):
        """Teacher-forced pass, one decoder step per teacher frame.

        token_ids (B, T) right-padded; teacher (B, K, D).  Returns
        (frames (B, K, D), alignment (B, T, K), stop_logits (B, K)); the
        alignment columns are the per-step attention distributions.
        """
        teacher = np.asarray(teacher)
        batch, steps, chans = teacher.shape
        if np.asarray(token_ids).shape[1] == 0:
            raise ValueError("empty text")
        memory = self._memory(p, token_ids)
        mask = self._score_mask(token_lengths, np.asarray(token_ids).shape[1])
        attn = bind_attention(p, "attn")
        zi = _guide_encode(p, guides)
        dims = self.dims
        h = Tensor(np.zeros((batch, dims.gen_hidden)))
        context = Tensor(np.zeros((batch, dims.gen_hidden)))
        cum = Tensor(np.zeros((batch, memory.shape[1])))
        frames, stops, aligns = [], [], []
        for k in range(steps):
            prev = Tensor(np.zeros((batch, chans))) if k == 0 else Tensor(teacher[:, k - 1])
            frame, stop, weights, context, h, cum = self._step(
                p, attn, memory, mask, prev, zi, context, h, cum)
            frames.append(frame.reshape(batch, 1, chans))
            stops.append(stop)
            aligns.append(weights.reshape(batch, -1, 1))
        return (concat(frames, axis=1), concat(aligns, axis=2),
                concat(stops, axis=-1))

    def infer(self, p: dict, token_ids, token_lengths, guides,
              max_frames: int, stop_threshold: float = 0.5):
        """Autoregressive generation, feeding each output frame back in.

        Per item, generation ends the step after its stop logit crosses the
        threshold (or at max_frames).  Returns (frames (B, K, D) ndarray,
        alignment (B, T, K) ndarray, lengths (B,)); frames beyond an item's
        length repeat its last frame.
        """
        if max_frames < 1:
            raise ValueError("max_frames must be >= 1")
        token_ids = np.asarray(token_ids)
        batch = token_ids.shape[0]
        memory = self._memory(p, token_ids)
        mask = self._score_mask(token_lengths, token_ids.shape[1])
        attn = bind_attention(p, "attn")
        zi = _guide_encode(p, np.asarray(guides))
        dims = self.dims
        h = Tensor(np.zeros((batch, dims.gen_hidden)))
        context = Tensor(np.zeros((batch, dims.gen_hidden)))
        cum = Tensor(np.zeros((batch, memory.shape[1])))
        prev = Tensor(np.zeros((batch, dims.channels)))
        lengths = np.zeros(batch, dtype=np.int64)
        stopped = np.zeros(batch, dtype=bool)
        frames, aligns = [], []
        for k in range(max_frames):
            frame, stop, weights, context, h, cum = self._step(
                p, attn, memory, mask, prev, zi, context, h, cum)
            frames.append(frame.data)
            aligns.append(weights.data)
            lengths[~stopped] = k + 1
            stopped |= stop.data[:, 0] > _logit(stop_threshold)
            if stopped.all():
                break
            prev = frame
        out = np.stack(frames, axis=1)                     # (B, K, D)
        for b in range(batch):
            out[b, lengths[b]:] = out[b, lengths[b] - 1]
        return out, np.stack(aligns, axis=2), lengths

    def generate(self, token_ids, token_lengths, guides, max_frames,
                 stop_threshold: float = 0.5):
        return self.infer(self.detached(), token_ids, token_lengths, guides,
                          max_frames, stop_threshold)


def _logit(prob: float) -> float:
    return float(np.log(prob / (1.0 - prob)))


def save_models(reader: Reader, generator, directory: str, meta: dict):
    import json
    import os
    os.makedirs(directory, exist_ok=True)
    reader.store.save(os.path.join(directory, "reader"))
    generator.store.save(os.path.join(directory, "generator"))
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_models(directory: str):
    import json
    import os
    with open(os.path.join(directory, "meta.json")) as f:
        meta = json.load(f)
    dims = ModelDims(**meta["dims"])
    reader = Reader(dims, seed=0)
    reader.store = ParamStore.load(os.path.join(directory, "reader"))
    cls = DurationGenerator if meta["generator"] == "duration" else AttentionGenerator
    generator = cls(dims, seed=0)
    generator.store = ParamStore.load(os.path.join(directory, "generator"))
    return reader, generator, meta
