"""Deterministic synthetic corpus: restricted-grammar sentences rendered to
viseme traces with per-speaker offsets, boundary crossfades, and noise.

Every random draw flows from (seed, utterance id) through sha256, so corpora
regenerate bit-identically and generation order never matters.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

SILENCE_START = "<#>"
SILENCE_END = "<$>"
SPACE = "<sp>"
BLANK = "<blank>"

TRACE_MAGIC = b"DLTR"
TRACE_VERSION = 1

GRID_SLOTS = [
    ["bin", "lay", "place", "set"],
    ["blue", "green", "red", "white"],
    ["at", "by", "in", "with"],
    [c for c in "abcdefghijklmnopqrstuvxyz"],  # letters, no w
    ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"],
    ["again", "now", "please", "soon"],
]

# small hand lexicon for the phoneme-unit variant
PHONEME_LEXICON = {
    "bin": ["b", "ih", "n"], "lay": ["l", "ey"], "place": ["p", "l", "ey", "s"],
    "set": ["s", "eh", "t"],
    "blue": ["b", "l", "uw"], "green": ["g", "r", "iy", "n"],
    "red": ["r", "eh", "d"], "white": ["w", "ay", "t"],
    "at": ["ae", "t"], "by": ["b", "ay"], "in": ["ih", "n"],
    "with": ["w", "ih", "dh"],
    "a": ["ey"], "b": ["b", "iy"], "c": ["s", "iy"], "d": ["d", "iy"],
    "e": ["iy"], "f": ["eh", "f"], "g": ["jh", "iy"], "h": ["ey", "ch"],
    "i": ["ay"], "j": ["jh", "ey"], "k": ["k", "ey"], "l": ["eh", "l"],
    "m": ["eh", "m"], "n": ["eh", "n"], "o": ["ow"], "p": ["p", "iy"],
    "q": ["k", "y", "uw"], "r": ["aa", "r"], "s": ["eh", "s"],
    "t": ["t", "iy"], "u": ["y", "uw"], "v": ["v", "iy"],
    "x": ["eh", "k", "s"], "y": ["w", "ay"], "z": ["z", "iy"],
    "zero": ["z", "ih", "r", "ow"], "one": ["w", "ah", "n"], "two": ["t", "uw"],
    "three": ["th", "r", "iy"], "four": ["f", "ao", "r"], "five": ["f", "ay", "v"],
    "six": ["s", "ih", "k", "s"], "seven": ["s", "eh", "v", "ah", "n"],
    "eight": ["ey", "t"], "nine": ["n", "ay", "n"],
    "again": ["ah", "g", "eh", "n"], "now": ["n", "aw"],
    "please": ["p", "l", "iy", "z"], "soon": ["s", "uw", "n"],
}


@dataclass
class Grammar:
    slots: list = field(default_factory=lambda: [list(s) for s in GRID_SLOTS])

    def sentence_count(self) -> int:
        n = 1
        for slot in self.slots:
            n *= len(slot)
        return n


@dataclass
class CorpusConfig:
    seed: int = 0
    utterances: int = 2000
    speakers: int = 4
    channels: int = 8
    noise_sigma: float = 0.02
    coarticulation: int = 1
    paired_fraction: float = 0.1
    eval_fraction: float = 0.25
    frame_cap: int = 75
    token_min: int = 2
    token_max: int = 5
    silence_min: int = 3
    silence_max: int = 8
    offset_scale: float = 0.05
    unit: str = "char"  # "char" or "phoneme"


def derived_seed(root_seed: int, *parts) -> int:
    """Stable per-entity sub-seed; independent of generation order."""
    text = f"{root_seed}|" + "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derived_rng(root_seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derived_seed(root_seed, *parts))


class Vocabulary:
    """Token inventory with the blank at index 0."""

    def __init__(self, tokens):
        if tokens[0] != BLANK:
            raise ValueError("vocabulary must start with the blank token")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens) -> list[int]:
        return [self.index[t] for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def for_unit(cls, unit: str) -> "Vocabulary":
        if unit == "char":
            units = sorted({c for slot in GRID_SLOTS for w in slot for c in w})
            return cls([BLANK, SILENCE_START, SILENCE_END, SPACE] + units)
        if unit == "phoneme":
            units = sorted({p for ph in PHONEME_LEXICON.values() for p in ph})
            return cls([BLANK, SILENCE_START, SILENCE_END] + units)
        raise ValueError(f"unknown unit {unit!r}")


def sample_words(grammar: Grammar, rng: np.random.Generator) -> list[str]:
    return [slot[rng.integers(len(slot))] for slot in grammar.slots]


def tokenize(words, unit: str) -> list[str]:
    """Sentence words -> token sequence with silence markers at both ends."""
    body: list[str] = []
    for i, word in enumerate(words):
        if i and unit == "char":
            body.append(SPACE)
        if unit == "char":
            body.extend(word)
        else:
            body.extend(PHONEME_LEXICON[word])
    return [SILENCE_START] + body + [SILENCE_END]


def sample_sentence(grammar: Grammar, rng: np.random.Generator,
                    unit: str = "char") -> list[str]:
    return tokenize(sample_words(grammar, rng), unit)


def is_silence(token: str) -> bool:
    return token in (SILENCE_START, SILENCE_END)


def sample_durations(tokens, rng: np.random.Generator, cfg: CorpusConfig) -> list[int]:
    """Per-token frame counts within the configured ranges, total <= frame_cap.

    Overshoot is absorbed by shrinking silence first, then the largest
    non-silence counts, so every count stays inside its range.
    """
    if not tokens:
        raise ValueError("empty token sequence")
    silence = [is_silence(t) for t in tokens]
    counts = [int(rng.integers(cfg.silence_min, cfg.silence_max + 1)) if s
              else int(rng.integers(cfg.token_min, cfg.token_max + 1))
              for s in silence]
    cap = cfg.frame_cap
    if cap:
        floor = sum(cfg.silence_min if s else cfg.token_min for s in silence)
        if floor > cap:
            raise ValueError(f"{len(tokens)} tokens cannot fit in {cap} frames")
        total = sum(counts)
        while total > cap:
            candidates = [i for i, s in enumerate(silence)
                          if s and counts[i] > cfg.silence_min]
            if not candidates:
                candidates = [i for i, s in enumerate(silence)
                              if not s and counts[i] > cfg.token_min]
            shrink = max(candidates, key=lambda i: (counts[i], -i))
            counts[shrink] -= 1
            total -= 1
    return counts


class VisemeTable:
    """Canonical frame vector per token; silence maps near the neutral 0.5."""

    def __init__(self, tokens, vectors: np.ndarray):
        self.tokens = list(tokens)
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self._row = {t: i for i, t in enumerate(self.tokens)}

    def vector(self, token: str) -> np.ndarray:
        return self.vectors[self._row[token]]

    def min_gap(self) -> float:
        n = len(self.tokens)
        gap = np.inf
        for i in range(n):
            for j in range(i + 1, n):
                gap = min(gap, np.abs(self.vectors[i] - self.vectors[j]).max())
        return float(gap)


def build_viseme_table(vocab: Vocabulary, channels: int,
                       seed: int, min_gap: float = 0.05) -> VisemeTable:
    """Sample token vectors in [0.1, 0.9]^D, regenerating until all pairwise
    L-infinity gaps reach `min_gap`."""
    renderable = [t for t in vocab.tokens if t != BLANK]
    for attempt in range(64):
        rng = derived_rng(seed, "visemes", attempt)
        vectors = rng.uniform(0.1, 0.9, size=(len(renderable), channels))
        for tok, level in ((SILENCE_START, 0.42), (SILENCE_END, 0.58)):
            if tok in renderable:
                vectors[renderable.index(tok)] = level
        table = VisemeTable(renderable, vectors)
        if table.min_gap() >= min_gap:
            return table
    raise RuntimeError("could not satisfy viseme separation; lower min_gap or raise channels")


def render_trace(tokens, durations, speaker_offset, table: VisemeTable,
                 noise_sigma: float, coarticulation: int,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Expand tokens to frames, crossfade across boundaries, add offset and
    noise, clamp to [0, 1].  With sigma=0 and width 0 interior frames equal
    the table vectors plus offset exactly."""
    if len(tokens) != len(durations):
        raise ValueError("token/duration length mismatch")
    base_rows = np.stack([table.vector(t) for t in tokens])
    owner = np.repeat(np.arange(len(tokens)), np.asarray(durations, dtype=np.int64))
    frames = base_rows[owner].copy()
    w = int(coarticulation)
    if w > 0:
        starts = np.cumsum(durations)[:-1]  # first frame of each next token
        for i, boundary in enumerate(starts):
            nxt = base_rows[i + 1]
            for d in range(1, w + 1):
                k = boundary - d
                if k < 0 or owner[k] != i:
                    break
                mix = (w - d + 1) / (2.0 * w)
                frames[k] = (1.0 - mix) * base_rows[i] + mix * nxt
    frames = frames + np.asarray(speaker_offset)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        frames = frames + rng.normal(0.0, noise_sigma, size=frames.shape)
    return np.clip(frames, 0.0, 1.0)


def write_trace(path, frames) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    k, d = arr.shape
    with open(path, "wb") as f:
        f.write(TRACE_MAGIC)
        f.write(bytes([TRACE_VERSION]))
        f.write(np.asarray([k, d], dtype="<u4").tobytes())
        f.write(arr.tobytes())


def read_trace(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TRACE_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if raw[4] != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported version {raw[4]}")
    k, d = np.frombuffer(raw[5:13], dtype="<u4")
    frames = np.frombuffer(raw[13:], dtype="<f4")
    if frames.size != k * d:
        raise ValueError(f"{path}: truncated payload")
    return frames.reshape(int(k), int(d)).copy()


def _distribute(total: int, bins: int) -> list[int]:
    base = total // bins
    out = [base] * bins
    for i in range(total - base * bins):
        out[i] += 1
    return out


def _speaker_id(i: int) -> str:
    return f"s{i:02d}"


def make_corpus(cfg: CorpusConfig, out_dir: str) -> dict:
    """Generate traces + manifest + metadata under out_dir; returns a summary.

    Split protocol: a per-speaker eval slice is held out first, the remainder
    splits into paired vs unpaired by paired_fraction, and the unpaired pool
    is halved into text_only and lip_only with disjoint sentence texts.
    """
    if not 0.0 < cfg.paired_fraction <= 1.0:
        raise ValueError("paired_fraction must be in (0, 1]")
    if not 0.0 <= cfg.eval_fraction < 1.0:
        raise ValueError("eval_fraction must be in [0, 1)")
    if cfg.speakers < 1:
        raise ValueError("need at least one speaker")

    grammar = Grammar()
    vocab = Vocabulary.for_unit(cfg.unit)
    table = build_viseme_table(vocab, cfg.channels, cfg.seed)
    offsets = {_speaker_id(s): derived_rng(cfg.seed, "offset", s)
               .uniform(-cfg.offset_scale, cfg.offset_scale, cfg.channels)
               for s in range(cfg.speakers)}

    os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)

    entries = []
    per_speaker = _distribute(cfg.utterances, cfg.speakers)
    for s in range(cfg.speakers):
        speaker = _speaker_id(s)
        sent_rng = derived_rng(cfg.seed, "sentences", s)
        seen = set()
        texts = []
        while len(texts) < per_speaker[s]:
            words = sample_words(grammar, sent_rng)
            sentence = " ".join(words)
            if sentence not in seen:
                seen.add(sentence)
                texts.append(sentence)
        for i, sentence in enumerate(texts):
            utt_id = f"{speaker}_u{i:04d}"
            tokens = tokenize(sentence.split(), cfg.unit)
            durations = sample_durations(tokens, derived_rng(cfg.seed, "durations", utt_id), cfg)
            entries.append({
                "id": utt_id,
                "speaker": speaker,
                "text": sentence,
                "durations": durations,
                "trace": f"traces/{utt_id}.dltr",
                "split": None,
            })

    # eval first, per speaker; then paired_fraction of what remains
    by_speaker: dict[str, list[dict]] = {}
    for e in entries:
        by_speaker.setdefault(e["speaker"], []).append(e)
    unpaired = []
    for speaker, items in sorted(by_speaker.items()):
        pick = derived_rng(cfg.seed, "eval", speaker)
        n_eval = int(round(cfg.eval_fraction * len(items)))
        eval_idx = set(pick.choice(len(items), size=n_eval, replace=False).tolist())
        rest = [e for i, e in enumerate(items) if i not in eval_idx]
        for i in eval_idx:
            items[i]["split"] = "eval"
        pick = derived_rng(cfg.seed, "paired", speaker)
        n_paired = int(round(cfg.paired_fraction * len(rest)))
        paired_idx = set(pick.choice(len(rest), size=n_paired, replace=False).tolist())
        for i, e in enumerate(rest):
            if i in paired_idx:
                e["split"] = "paired"
            else:
                unpaired.append(e)

    # halve the unpaired pool into text-only and lip-only, keeping the two
    # halves disjoint at sentence level
    groups: dict[str, list[dict]] = {}
    for e in unpaired:
        groups.setdefault(e["text"], []).append(e)
    order = sorted(groups)
    derived_rng(cfg.seed, "halves").shuffle(order)
    n_text = n_lip = 0
    for sentence in order:
        bucket = groups[sentence]
        if n_text <= n_lip:
            tag, n_text = "text_only", n_text + len(bucket)
        else:
            tag, n_lip = "lip_only", n_lip + len(bucket)
        for e in bucket:
            e["split"] = tag

    # render and write traces for every entry that carries one
    for e in entries:
        if e["split"] == "text_only":
            e["trace"] = None
            e["durations"] = None
            continue
        tokens = tokenize(e["text"].split(), cfg.unit)
        rng = derived_rng(cfg.seed, "trace", e["id"])
        frames = render_trace(tokens, e["durations"], offsets[e["speaker"]],
                              table, cfg.noise_sigma, cfg.coarticulation, rng)
        write_trace(os.path.join(out_dir, e["trace"]), frames)
        if e["split"] == "lip_only":
            e["text"] = None
            e["durations"] = None

    entries.sort(key=lambda e: e["id"])
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    meta = {
        "config": asdict(cfg),
        "tokens": vocab.tokens,
        "viseme_tokens": table.tokens,
        "viseme_vectors": table.vectors.tolist(),
        "speaker_offsets": {k: v.tolist() for k, v in offsets.items()},
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)

    counts = {}
    for e in entries:
        counts[e["split"]] = counts.get(e["split"], 0) + 1
    return counts


class Corpus:
    """Loaded manifest plus metadata; traces are read lazily."""

    def __init__(self, data_dir: str):
        self.dir = data_dir
        manifest = os.path.join(data_dir, "manifest.jsonl")
        meta = os.path.join(data_dir, "meta.json")
        if not os.path.exists(manifest) or not os.path.exists(meta):
            raise FileNotFoundError(f"{data_dir} is not a corpus directory")
        with open(meta) as f:
            self.meta = json.load(f)
        self.config = CorpusConfig(**self.meta["config"])
        self.vocab = Vocabulary(self.meta["tokens"])
        self.table = VisemeTable(self.meta["viseme_tokens"],
                                 np.asarray(self.meta["viseme_vectors"]))
        self.entries = []
        with open(manifest) as f:
            for line in f:
                if line.strip():
                    self.entries.append(json.loads(line))
        tags = {e["split"] for e in self.entries}
        bad = tags - {"paired", "text_only", "lip_only", "eval"}
        if bad:
            raise ValueError(f"unknown split tags {bad}")

    def split(self, tag: str) -> list[dict]:
        return [e for e in self.entries if e["split"] == tag]

    def load_trace(self, entry: dict) -> np.ndarray:
        if not entry["trace"]:
            raise ValueError(f"entry {entry['id']} carries no trace")
        return read_trace(os.path.join(self.dir, entry["trace"]))

    def tokens_for(self, entry: dict) -> list[str]:
        if entry["text"] is None:
            raise ValueError(f"entry {entry['id']} carries no text")
        return tokenize(entry["text"].split(), self.config.unit)
