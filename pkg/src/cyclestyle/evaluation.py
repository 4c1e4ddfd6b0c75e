"""Transfer metrics: style accuracy, content preservation, language-model perplexity, ablations."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import EOS, RESERVED, StyledCorpus, SubstitutionOracle, Vocabulary, make_batch, make_batches
from .models import CNNClassifier, lstm_cell, lstm_params, transfer

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- style accuracy


class StyleJudge(Protocol):
    def judge(self, sentences: Sequence[Sequence[int]]) -> np.ndarray: ...


class OracleJudge:
    """Exact rule judge for synthetic corpora."""

    def __init__(self, oracle: SubstitutionOracle):
        self.oracle = oracle

    def judge(self, sentences):
        return np.array([self.oracle.classify(s) for s in sentences], dtype=np.int64)


class FrozenClassifier:
    """CNN style classifier that is never updated after training."""

    def __init__(self, cnn: CNNClassifier):
        self.cnn = cnn
        for t in cnn.params.values():
            t.requires_grad = False
            t.grad = None

    def judge(self, sentences):
        out = []
        for k in range(0, len(sentences), 256):
            out.append(self.cnn.predict([list(s) for s in sentences[k : k + 256]]))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_frozen_classifier(sentences0: Sequence[Sequence[int]], sentences1: Sequence[Sequence[int]],
                            vocab_size: int, emb: int = 100, filters: int = 128, widths=(1, 2, 3, 4),
                            epochs: int = 5, lr: float = 0.003, batch_size: int = 64, seed: int = 0
                            ) -> FrozenClassifier:
    rng = ad.seeded_rng(seed)
    cnn = CNNClassifier(vocab_size, emb, filters, widths, rng, prefix="judge.")
    opt = ad.Adam(cnn.params.values(), lr=lr)
    for _ in range(epochs):
        batches = make_batches(sentences0, 0, batch_size, rng) + make_batches(sentences1, 1, batch_size, rng)
        for k in rng.permutation(len(batches)):
            b = batches[k]
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = ad.cross_entropy(cnn.logits((b.ids, b.lengths)), b.styles)
            ad.backward(loss, tape)
            opt.step()
    return FrozenClassifier(cnn)


def eval_accuracy(transferred: Sequence[Sequence[int]], judge: StyleJudge, target: int = 1) -> float:
    """Percentage of sentences the judge assigns to ``target``."""
    if len(transferred) == 0:
        raise ValueError("eval_accuracy: no sentences")
    return 100.0 * float(np.mean(judge.judge(transferred) == target))


# ---------------------------------------------------------------- content preservation


@dataclass
class EmbeddingTable:
    vectors: dict[str, np.ndarray]
    dim: int

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        """Text format: a token followed by its floats, space separated, one per line."""
        vectors: dict[str, np.ndarray] = {}
        dim = None
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                vec = np.array([float(x) for x in parts[1:]])
                if dim is None:
                    dim = len(vec)
                elif len(vec) != dim:
                    raise ValueError(f"{path}:{n}: expected {dim} values, got {len(vec)}")
                vectors[parts[0]] = vec
        if dim is None:
            raise ValueError(f"{path}: no embeddings found")
        return cls(vectors, dim)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, vec in self.vectors.items():
                fh.write(tok + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def sentence_vector(tokens: Sequence[str], table: EmbeddingTable) -> np.ndarray | None:
    """min | mean | max pooling over the in-table word vectors, or None if there are none."""
    vecs = [table.vectors[t] for t in tokens if t in table.vectors]
    if not vecs:
        return None
    m = np.stack(vecs)
    return np.concatenate([m.min(axis=0), m.mean(axis=0), m.max(axis=0)])


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def content_preservation(source: Sequence[str], transferred: Sequence[str], table: EmbeddingTable) -> float | None:
    """Cosine between pooled sentence vectors; None when either side has no known word."""
    a, b = sentence_vector(source, table), sentence_vector(transferred, table)
    if a is None or b is None:
        return None
    return _cosine(a, b)


def corpus_content_preservation(pairs, table: EmbeddingTable) -> tuple[float, list[float | None], int]:
    """(mean over scorable pairs, per-pair scores, number of skipped pairs)."""
    scores = [content_preservation(s, t, table) for s, t in pairs]
    kept = [s for s in scores if s is not None]
    mean = float(np.mean(kept)) if kept else float("nan")
    return mean, scores, len(scores) - len(kept)


# ---------------------------------------------------------------- language model


class SequenceScorer(Protocol):
    def sequence_log_probs(self, sentences: Sequence[Sequence[int]]) -> list[np.ndarray]: ...


@dataclass
class LMConfig:
    emb: int = 100
    hidden: int = 200
    lr: float = 0.0005
    batch_size: int = 64
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0


class LanguageModel:
    """Single-layer word-level LSTM language model."""

    def __init__(self, vocab_size: int, emb: int = 100, hidden: int = 200, seed: int = 0):
        rng = ad.seeded_rng(seed)
        self.params = {"emb": ad.normal_param(rng, (vocab_size, emb))}
        self.params.update(lstm_params(rng, emb, hidden, "lstm."))
        self.params["out.W"] = ad.uniform_param(rng, (hidden, vocab_size))
        self.params["out.b"] = ad.zeros_param((vocab_size,))
        self.hidden = hidden

    def logits(self, inputs: np.ndarray) -> ad.Tensor:
        B, T = inputs.shape
        h = c = ad.Tensor(np.zeros((B, self.hidden)))
        steps = []
        for t in range(T):
            h, c = lstm_cell(ad.embedding_lookup(self.params["emb"], inputs[:, t]), (h, c), self.params, "lstm.")
            steps.append(ad.add(ad.matmul(h, self.params["out.W"]), self.params["out.b"]))
        return ad.stack(steps, axis=1)

    def batch_loss(self, sentences: Sequence[Sequence[int]]) -> ad.Tensor:
        inp, tgt, mask = make_batch([list(s) for s in sentences], 1).targets()
        return ad.cross_entropy(self.logits(inp), tgt, mask)

    def sequence_log_probs(self, sentences):
        """Natural-log probabilities of every token of each sentence followed by EOS."""
        out: list[np.ndarray] = []
        with ad.no_grad():
            for k in range(0, len(sentences), 256):
                chunk = [list(s) for s in sentences[k : k + 256]]
                lengths = np.array([len(s) for s in chunk])
                padded = [s if s else [EOS] for s in chunk]
                inp, tgt, _ = make_batch(padded, 1).targets()
                # empty sentences: only EOS is scored, right after BOS
                for i, s in enumerate(chunk):
                    if not s:
                        tgt[i, 0] = EOS
                logp = ad.log_softmax(self.logits(inp)).data
                picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
                out.extend(picked[i, : lengths[i] + 1] for i in range(len(chunk)))
        return out

    def embedding_table(self, vocab: Vocabulary, tokens: set[str] | None = None) -> EmbeddingTable:
        """Input embeddings as a CP table, limited to ``tokens`` (e.g. those seen in training)."""
        E = self.params["emb"].data
        keep = {t: E[i].copy() for i, t in enumerate(vocab.itos)
                if t not in RESERVED and (tokens is None or t in tokens)}
        return EmbeddingTable(keep, E.shape[1])


def perplexity(sentences: Sequence[Sequence[int]], lm: SequenceScorer) -> float:
    """exp(total NLL / total tokens), counting one EOS per sentence."""
    if len(sentences) == 0:
        raise ValueError("perplexity: no sentences")
    logps = lm.sequence_log_probs(sentences)
    total = sum(float(lp.sum()) for lp in logps)
    count = sum(len(lp) for lp in logps)
    return math.exp(-total / count)


def train_lm(train_sentences: Sequence[Sequence[int]], vocab_size: int, config: LMConfig | None = None,
             dev_sentences: Sequence[Sequence[int]] | None = None) -> tuple[LanguageModel, list[float]]:
    """Train with Adam, keeping the parameters of the best dev-perplexity epoch.

    Returns the model and the dev perplexity after each epoch.
    """
    config = config or LMConfig()
    if not train_sentences:
        raise ValueError("train_lm: empty corpus")
    dev_sentences = train_sentences if dev_sentences is None else dev_sentences
    lm = LanguageModel(vocab_size, config.emb, config.hidden, config.seed)
    opt = ad.Adam(lm.params.values(), lr=config.lr)
    rng = ad.seeded_rng(config.seed + 1)
    history: list[float] = []
    best, best_ppl, stale = None, math.inf, 0
    for _ in range(config.max_epochs):
        order = rng.permutation(len(train_sentences))
        for k in range(0, len(order), config.batch_size):
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = lm.batch_loss([train_sentences[i] for i in order[k : k + config.batch_size]])
            ad.backward(loss, tape)
            opt.step()
        ppl = perplexity(dev_sentences, lm)
        history.append(ppl)
        if ppl < best_ppl:
            best_ppl, stale = ppl, 0
            best = {n: t.data.copy() for n, t in lm.params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    for n, arr in best.items():
        lm.params[n].data = arr
    return lm, history


# ---------------------------------------------------------------- reports


@dataclass
class SentenceRecord:
    source: str
    transferred: str
    verdict: int
    cp: float | None
    nll: float


@dataclass
class EvalReport:
    acc: float
    cp: float
    ppl: float
    records: list[SentenceRecord] = field(default_factory=list)
    cp_skipped: int = 0

    def summary(self) -> str:
        return f"acc={self.acc:.4f} cp={self.cp:.4f} ppl={self.ppl:.4f}"

    def write(self, path) -> Path:
        """Per-sentence TSV at ``path``; the summary line goes to ``<path>.summary``."""
        path = Path(path)
        lines = ["source\ttransferred\tverdict\tcp\tnll"]
        for r in self.records:
            cp = "" if r.cp is None else repr(r.cp)
            lines.append(f"{r.source}\t{r.transferred}\t{r.verdict}\t{cp}\t{r.nll!r}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        summary = path.with_name(path.name + ".summary")
        summary.write_text(self.summary() + "\n", encoding="utf-8")
        return summary


def evaluate_transfer(sources: Sequence[Sequence[int]], transferred: Sequence[Sequence[int]], vocab: Vocabulary,
                      judge: StyleJudge, lm: SequenceScorer, embeddings: EmbeddingTable,
                      target: int = 1) -> EvalReport:
    if len(sources) != len(transferred):
        raise ValueError(f"{len(sources)} source sentences but {len(transferred)} transferred")
    verdicts = judge.judge(transferred)
    acc = eval_accuracy(transferred, judge, target)
    pairs = [(vocab.decode(s), vocab.decode(t)) for s, t in zip(sources, transferred)]
    cp, scores, skipped = corpus_content_preservation(pairs, embeddings)
    logps = lm.sequence_log_probs(transferred)
    ppl = math.exp(-sum(float(lp.sum()) for lp in logps) / sum(len(lp) for lp in logps))
    records = [SentenceRecord(" ".join(a), " ".join(b), int(v), c, -float(lp.sum()))
               for (a, b), v, c, lp in zip(pairs, verdicts, scores, logps)]
    return EvalReport(acc, cp, ppl, records, skipped)


# ---------------------------------------------------------------- ablations

ABLATIONS = {
    "full": {},
    "no_attention": {"no_attention": True},
    "no_back_transfer": {"no_back_transfer": True},
    "no_attention_no_back_transfer": {"no_attention": True, "no_back_transfer": True},
}


@dataclass
class AblationRow:
    variant: str
    acc: float
    cp: float
    ppl: float
    oracle_acc: float | None = None
    content_kept: float | None = None
    best_epoch: int = 0


@dataclass
class EvalKit:
    """Frozen evaluation resources shared by every variant."""

    judge: StyleJudge
    lm: LanguageModel
    embeddings: EmbeddingTable
    oracle: SubstitutionOracle | None = None


def build_eval_kit(corpus: StyledCorpus, lm_config: LMConfig | None = None, oracle: SubstitutionOracle | None = None,
                   use_oracle_judge: bool = False, embeddings: EmbeddingTable | None = None,
                   classifier_kwargs: dict | None = None) -> EvalKit:
    """Train the LM on target-style training text and the judge on the test split."""
    V = len(corpus.vocab)
    lm, _ = train_lm(corpus.split("train", 1), V, lm_config, corpus.split("dev", 1))
    if embeddings is None:
        seen = {corpus.vocab.itos[t] for s in corpus.split("train", 1) for t in s}
        embeddings = lm.embedding_table(corpus.vocab, seen)
    if use_oracle_judge:
        if oracle is None:
            raise ValueError("oracle judge requested without an oracle")
        judge: StyleJudge = OracleJudge(oracle)
    else:
        judge = train_frozen_classifier(corpus.split("test", 0), corpus.split("test", 1), V,
                                        **(classifier_kwargs or {}))
    return EvalKit(judge, lm, embeddings, oracle)


def score_model(model, corpus: StyledCorpus, kit: EvalKit) -> tuple[EvalReport, list[list[int]], dict]:
    """Transfer the style-0 test split to style 1 and score it."""
    from .corpus import oracle_transfer_score

    sources = corpus.split("test", 0)
    outputs = transfer(model, sources, 0, 1)
    report = evaluate_transfer(sources, outputs, corpus.vocab, kit.judge, kit.lm, kit.embeddings)
    extra = {}
    if kit.oracle is not None:
        scores = [oracle_transfer_score(s, o, kit.oracle) for s, o in zip(sources, outputs)]
        extra["oracle_acc"] = 100.0 * float(np.mean([ok for ok, _ in scores]))
        extra["content_kept"] = float(np.mean([kept for _, kept in scores]))
    return report, outputs, extra


def _run_variant(args) -> AblationRow:
    from .training import train

    name, corpus, config, kit = args
    result = train(corpus, config)
    report, _, extra = score_model(result.model, corpus, kit)
    log.info("%s: %s", name, report.summary())
    return AblationRow(name, report.acc, report.cp, report.ppl, extra.get("oracle_acc"),
                       extra.get("content_kept"), result.best_epoch)


def run_ablations(corpus: StyledCorpus, base_config, kit: EvalKit, variants: Sequence[str] = tuple(ABLATIONS),
                  workers: int = 1) -> list[AblationRow]:
    """Train and score each variant with the same seed and the same evaluation kit."""
    jobs = [(name, corpus, replace(base_config, **ABLATIONS[name]), kit) for name in variants]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_variant, jobs))
    return [_run_variant(job) for job in jobs]


def ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = ["variant\tacc\tcp\tppl\toracle_acc\tcontent_kept"]
    for r in rows:
        extra = [("" if v is None else f"{v:.4f}") for v in (r.oracle_acc, r.content_kept)]
        lines.append("\t".join([r.variant, f"{r.acc:.4f}", f"{r.cp:.4f}", f"{r.ppl:.4f}", *extra]))
    return "\n".join(lines) + "\n"
