"""Tokenisation, vocabularies, two-style corpora, batching and the synthetic substitution corpus."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import seeded_rng

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

MIN_LEN, MAX_LEN = 2, 15


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Token/id bijection with ids 0..3 reserved for PAD, UNK, BOS and EOS."""

    def __init__(self, tokens: Sequence[str], min_frequency: int = 1):
        self.min_frequency = min_frequency
        self.itos: list[str] = list(RESERVED) + list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("vocabulary tokens must be unique")

    @classmethod
    def build(cls, corpora: Iterable[Sequence[str]], min_frequency: int) -> "Vocabulary":
        """Keep tokens seen at least ``min_frequency`` times, most frequent first.

        Ties are broken by first occurrence, so construction is deterministic.
        """
        if min_frequency < 1:
            raise CorpusError("min_frequency must be >= 1")
        counts: Counter[str] = Counter()
        first: dict[str, int] = {}
        for sent in corpora:
            for tok in sent:
                counts[tok] += 1
                first.setdefault(tok, len(first))
        if not counts:
            raise CorpusError("cannot build a vocabulary from an empty corpus")
        kept = [t for t in counts if counts[t] >= min_frequency and t not in RESERVED]
        kept.sort(key=lambda t: (-counts[t], first[t]))
        return cls(kept, min_frequency)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        lines = [f"#minfreq={self.min_frequency}"] + self.itos[len(RESERVED):]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#minfreq="):
            raise CorpusError(f"{path}: missing '#minfreq=<n>' header")
        return cls([ln for ln in lines[1:] if ln], int(lines[0].split("=", 1)[1]))


@dataclass
class StyledCorpus:
    """Two non-parallel sentence sets; style 0 is the source style, style 1 the target."""

    vocab: Vocabulary
    # split name -> style -> list of id sequences (no BOS/EOS)
    splits: dict[str, dict[int, list[list[int]]]]

    def split(self, name: str, style: int) -> list[list[int]]:
        return self.splits[name][style]

    def sizes(self) -> dict[str, tuple[int, int]]:
        return {k: (len(v[0]), len(v[1])) for k, v in self.splits.items()}


def split_sentences(sents: list, fractions: Sequence[float], rng: np.random.Generator) -> list[list]:
    order = rng.permutation(len(sents))
    n = len(sents)
    cuts = np.floor(np.cumsum(fractions)[:-1] * n).astype(int)
    return [[sents[i] for i in part] for part in np.split(order, cuts)]


def read_sentences(path, min_len: int = MIN_LEN, max_len: int = MAX_LEN) -> list[list[str]]:
    """Tokenised lines of ``path`` within the length bounds, duplicates removed (first kept)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus file {path}: {exc}") from exc
    seen: set[tuple[str, ...]] = set()
    out = []
    for line in text.splitlines():
        toks = tokenize(line)
        if not (min_len <= len(toks) <= max_len):
            continue
        key = tuple(toks)
        if key in seen:
            continue
        seen.add(key)
        out.append(toks)
    return out


def load_styled_corpus(path0, path1, vocab: Vocabulary | None = None, min_len: int = MIN_LEN,
                       max_len: int = MAX_LEN, min_frequency: int = 1,
                       fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> StyledCorpus:
    """Read, filter, deduplicate, split and encode a two-file corpus.

    When ``vocab`` is None it is built from the training split of both styles.
    """
    raw = [read_sentences(p, min_len, max_len) for p in (path0, path1)]
    for p, sents in zip((path0, path1), raw):
        if not sents:
            raise CorpusError(f"{p}: no sentences left after length filtering")
    rng = seeded_rng(seed)
    parts = {s: split_sentences(raw[s], fractions, rng) for s in (0, 1)}
    if vocab is None:
        vocab = Vocabulary.build(parts[0][0] + parts[1][0], min_frequency)
    names = ("train", "dev", "test")
    splits = {name: {s: [vocab.encode(t) for t in parts[s][k]] for s in (0, 1)} for k, name in enumerate(names)}
    return StyledCorpus(vocab, splits)


@dataclass
class Batch:
    """Single-style minibatch, PAD-filled after each sentence."""

    ids: np.ndarray  # (B, T) int64
    lengths: np.ndarray  # (B,)
    style: int

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def styles(self) -> np.ndarray:
        return np.full(self.size, self.style, dtype=np.int64)

    @property
    def mask(self) -> np.ndarray:
        return (np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]).astype(np.float64)

    def targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Decoder inputs (BOS + x) and targets (x + EOS) with their mask."""
        B, T = self.ids.shape
        inp = np.full((B, T + 1), PAD, dtype=np.int64)
        tgt = np.full((B, T + 1), PAD, dtype=np.int64)
        inp[:, 0] = BOS
        inp[:, 1:] = self.ids
        tgt[:, :T] = self.ids
        tgt[np.arange(B), self.lengths] = EOS
        mask = (np.arange(T + 1)[None, :] <= self.lengths[:, None]).astype(np.float64)
        return inp, tgt, mask

    def sentences(self) -> list[list[int]]:
        return [list(self.ids[i, : self.lengths[i]]) for i in range(self.size)]


def make_batch(sentences: Sequence[Sequence[int]], style: int) -> Batch:
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    ids = np.full((len(sentences), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(sentences):
        ids[i, : len(s)] = s
    return Batch(ids, lengths, style)


def make_batches(sentences: Sequence[Sequence[int]], style: int, batch_size: int,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    """Cut one style's sentences into batches, shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    order = rng.permutation(len(sentences)) if rng is not None else np.arange(len(sentences))
    return [make_batch([sentences[i] for i in order[k : k + batch_size]], style)
            for k in range(0, len(order), batch_size)]


def paired_batches(corpus: StyledCorpus, split: str, batch_size: int,
                   rng: np.random.Generator | None = None) -> list[tuple[Batch, Batch]]:
    """One (style-0, style-1) pair per step; the smaller side is cycled to match the larger."""
    b0 = make_batches(corpus.split(split, 0), 0, batch_size, rng)
    b1 = make_batches(corpus.split(split, 1), 1, batch_size, rng)
    n = max(len(b0), len(b1))
    return [(b0[k % len(b0)], b1[k % len(b1)]) for k in range(n)]


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class SubstitutionOracle:
    """Exact ground truth for the synthetic corpus: marked tokens only occur in style 0."""

    marked: list[int]
    neutral: list[int]
    fillers: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.to_neutral = dict(zip(self.marked, self.neutral))
        self.to_marked = dict(zip(self.neutral, self.marked))
        self._marked = set(self.marked)

    def classify(self, sentence: Sequence[int]) -> int:
        return 0 if any(t in self._marked for t in sentence) else 1

    def is_marked(self, token: int) -> bool:
        return token in self._marked

    def neutralize(self, sentence: Sequence[int]) -> list[int]:
        return [self.to_neutral.get(t, t) for t in sentence]

    def save(self, path, vocab: Vocabulary) -> None:
        lines = [f"{vocab.itos[m]}\t{vocab.itos[n]}" for m, n in zip(self.marked, self.neutral)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "SubstitutionOracle":
        marked, neutral = [], []
        for ln in Path(path).read_text(encoding="utf-8").splitlines():
            if not ln.strip():
                continue
            m, n = ln.split("\t")
            marked.append(vocab.stoi.get(m, UNK))
            neutral.append(vocab.stoi.get(n, UNK))
        return cls(marked, neutral)


def _lcs(a: Sequence[int], b: Sequence[int]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def oracle_transfer_score(source: Sequence[int], transferred: Sequence[int], oracle: SubstitutionOracle,
                          target: int = 1) -> tuple[bool, float]:
    """(style correct, fraction of the source's unmarked tokens kept in order)."""
    style_ok = oracle.classify(transferred) == target
    keep = [t for t in source if not oracle.is_marked(t)]
    if not keep:
        return style_ok, 1.0
    out = [t for t in transferred if not oracle.is_marked(t)]
    return style_ok, _lcs(keep, out) / len(keep)


def synth_sentences(vocab_size: int = 60, n_marked: int = 8, n_sentences_per_style: int = 2000,
                   len_range: tuple[int, int] = (3, 10), seed: int = 7, zipf: float = 0.5,
                   ) -> tuple[list[list[str]], list[list[str]], list[tuple[str, str]]]:
    """Raw token sentences for both styles plus the marked/neutral lexicon.

    Style-0 sentences hold 1-2 marked words among fillers; style-1 sentences
    hold either 1-2 neutral words or fillers only. The two sides are drawn
    independently, so no sentence pairing exists.
    """
    n_fill = vocab_size - len(RESERVED) - 2 * n_marked
    lo, hi = len_range
    if n_marked < 1 or n_fill < 1:
        raise CorpusError(f"infeasible synthetic vocabulary: vocab_size={vocab_size}, n_marked={n_marked}")
    if not (MIN_LEN <= lo <= hi <= MAX_LEN) or lo < 2:
        raise CorpusError(f"len_range {len_range} outside [{MIN_LEN}, {MAX_LEN}]")
    marked = [f"m{k}" for k in range(n_marked)]
    neutral = [f"n{k}" for k in range(n_marked)]
    fillers = [f"w{k}" for k in range(n_fill)]
    weights = 1.0 / np.arange(1, n_fill + 1) ** zipf
    weights /= weights.sum()
    rng = seeded_rng(seed)

    def sentence(special: list[str] | None) -> list[str]:
        n = int(rng.integers(lo, hi + 1))
        k = 0 if special is None else int(rng.integers(1, min(2, n - 1) + 1))
        toks = [fillers[i] for i in rng.choice(n_fill, size=n - k, p=weights)]
        for _ in range(k):
            toks.insert(int(rng.integers(0, len(toks) + 1)), special[int(rng.integers(len(special)))])
        return toks

    def draw(kind: int) -> list[list[str]]:
        seen, out = set(), []
        attempts = 0
        while len(out) < n_sentences_per_style:
            attempts += 1
            if attempts > 200 * n_sentences_per_style:
                raise CorpusError("could not draw enough distinct sentences")
            if kind == 0:
                s = sentence(marked)
            else:
                s = sentence(neutral if rng.random() < 0.5 else None)
            if tuple(s) not in seen:
                seen.add(tuple(s))
                out.append(s)
        return out

    return draw(0), draw(1), list(zip(marked, neutral))


def synth_generate(vocab_size: int = 60, n_marked: int = 8, n_sentences_per_style: int = 2000,
                 len_range: tuple[int, int] = (3, 10), seed: int = 7,
                 fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[StyledCorpus, SubstitutionOracle]:
    """In-memory synthetic corpus with every generated word in the vocabulary."""
    s0, s1, lexicon = synth_sentences(vocab_size, n_marked, n_sentences_per_style, len_range, seed)
    tokens = [m for m, _ in lexicon] + [n for _, n in lexicon]
    tokens += sorted({t for s in s0 + s1 for t in s if t not in tokens}, key=lambda t: int(t[1:]))
    vocab = Vocabulary(tokens, 1)
    rng = seeded_rng(seed + 1)
    parts = {s: split_sentences(raw, fractions, rng) for s, raw in ((0, s0), (1, s1))}
    names = ("train", "dev", "test")
    splits = {name: {s: [vocab.encode(t) for t in parts[s][k]] for s in (0, 1)} for k, name in enumerate(names)}
    oracle = SubstitutionOracle([vocab.stoi[m] for m, _ in lexicon], [vocab.stoi[n] for _, n in lexicon],
                                [vocab.stoi[t] for t in tokens[2 * n_marked:]])
    return StyledCorpus(vocab, splits), oracle


def write_synth(out_dir, vocab_size: int, n_marked: int, per_style: int, seed: int,
                len_range: tuple[int, int] = (3, 10)) -> list[Path]:
    """Write style0.txt, style1.txt, oracle.tsv and manifest.json into ``out_dir``."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s0, s1, lexicon = synth_sentences(vocab_size, n_marked, per_style, len_range, seed)
    paths = [out / "style0.txt", out / "style1.txt", out / "oracle.tsv", out / "manifest.json"]
    paths[0].write_text("".join(detokenize(s) + "\n" for s in s0), encoding="utf-8")
    paths[1].write_text("".join(detokenize(s) + "\n" for s in s1), encoding="utf-8")
    paths[2].write_text("".join(f"{m}\t{n}\n" for m, n in lexicon), encoding="utf-8")
    manifest = {"generator": "synth_sentences", "seed": seed, "vocab_size": vocab_size, "n_marked": n_marked,
                "per_style": per_style, "len_range": list(len_range)}
    paths[3].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
