"""Five-term collaborative objective, joint Adam training and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .corpus import Batch, StyledCorpus, paired_batches
from .models import (
    MAX_GEN_LEN,
    ModelConfig,
    TransferModel,
    classify,
    decode_soft,
    decode_teacher_forced,
    encode,
)

log = logging.getLogger(__name__)

TERMS = ("rec", "class_td", "class_od", "back_rec", "class_btd")


class NumericalError(FloatingPointError):
    """A loss term became NaN or infinite."""

    def __init__(self, term: str, value: float, where: str = "train"):
        self.term = term
        super().__init__(f"{where}: loss term '{term}' is {value}")


class DivergenceError(NumericalError):
    pass


@dataclass
class TrainConfig:
    hidden: int = 200
    emb: int = 100
    filters: int = 128
    widths: tuple[int, ...] = (1, 2, 3, 4)
    lr: float = 0.0005
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    warmup_epochs: int = 1
    ae_warmup_epochs: int = 0
    temperature: float = 1.0
    temperature_decay: float = 0.5
    temperature_floor: float = 0.1
    max_gen_len: int = MAX_GEN_LEN
    clip_norm: float = 0.0
    seed: int = 0
    no_attention: bool = False
    no_back_transfer: bool = False
    w_rec: float = 1.0
    w_class_td: float = 1.0
    w_class_od: float = 1.0
    w_back_rec: float = 1.0
    w_class_btd: float = 1.0

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.emb, self.hidden, self.filters, tuple(self.widths),
                           attention=not self.no_attention)

    def temperature_at(self, epoch: int) -> float:
        """Softmax temperature for 1-based ``epoch``: halved each epoch down to the floor."""
        return max(self.temperature_floor, self.temperature * self.temperature_decay ** (epoch - 1))

    def weight(self, term: str) -> float:
        return getattr(self, "w_" + term)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LossBreakdown:
    rec: float = 0.0
    class_td: float = 0.0
    class_od: float = 0.0
    back_rec: float = 0.0
    class_btd: float = 0.0
    total: float = 0.0

    @classmethod
    def mean(cls, items: list["LossBreakdown"]) -> "LossBreakdown":
        n = max(len(items), 1)
        return cls(**{k: sum(getattr(b, k) for b in items) / n for k in TERMS + ("total",)})


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    dev_total: float
    temperature: float

    def line(self) -> str:
        t = self.train
        vals = [t.rec, t.class_td, t.class_od, t.back_rec, t.class_btd, t.total, self.dev_total]
        return "\t".join([str(self.epoch)] + [repr(float(v)) for v in vals])


LOG_HEADER = "epoch\trec\tclass_td\tclass_od\tback_rec\tclass_btd\ttotal\tdev_total"


# ---------------------------------------------------------------- loss terms


def _labels(batch: Batch, style: int) -> np.ndarray:
    return np.full(batch.size, style, dtype=np.int64)


def _reconstruction(model: TransferModel, enc, batch: Batch, style: int) -> ad.Tensor:
    inp, tgt, mask = batch.targets()
    return ad.cross_entropy(decode_teacher_forced(model, enc, style, inp), tgt, mask)


def batch_losses(model: TransferModel, batch: Batch, temperature: float = 1.0, back_transfer: bool = True,
                 max_gen_len: int = MAX_GEN_LEN, terms=TERMS) -> dict[str, ad.Tensor]:
    """All requested loss terms for one single-style batch, sharing intermediate passes.

    Forward transfer goes to the other style through soft decoding; the
    back-transfer terms re-encode that soft sequence and decode toward the
    original style again.
    """
    i = batch.style
    j = 1 - i
    ids = (batch.ids, batch.lengths)
    out: dict[str, ad.Tensor] = {}
    if "class_od" in terms:
        out["class_od"] = ad.cross_entropy(classify(model, ids), _labels(batch, i))
    needs_gen = {"rec", "class_td", "back_rec", "class_btd"} & set(terms)
    if not needs_gen:
        return out
    enc = encode(model, ids, i)
    if "rec" in terms:
        out["rec"] = _reconstruction(model, enc, batch, i)
    if not ({"class_td", "back_rec", "class_btd"} & set(terms)):
        return out
    forward = decode_soft(model, enc, j, temperature, max_gen_len)
    if "class_td" in terms:
        out["class_td"] = ad.cross_entropy(classify(model, forward), _labels(batch, j))
    if back_transfer and ({"back_rec", "class_btd"} & set(terms)):
        back_enc = encode(model, forward, j)
        if "back_rec" in terms:
            out["back_rec"] = _reconstruction(model, back_enc, batch, i)
        if "class_btd" in terms:
            back = decode_soft(model, back_enc, i, temperature, max_gen_len)
            out["class_btd"] = ad.cross_entropy(classify(model, back), _labels(batch, i))
    return out


def loss_reconstruction(batch: Batch, model: TransferModel) -> ad.Tensor:
    """Per-token cross-entropy of reconstructing the batch in its own style."""
    return batch_losses(model, batch, terms=("rec",))["rec"]


def loss_class_td(batch: Batch, model: TransferModel, temperature: float = 1.0) -> ad.Tensor:
    return batch_losses(model, batch, temperature, terms=("class_td",))["class_td"]


def loss_class_od(batch: Batch, model: TransferModel) -> ad.Tensor:
    return batch_losses(model, batch, terms=("class_od",))["class_od"]


def loss_back_rec(batch: Batch, model: TransferModel, temperature: float = 1.0) -> ad.Tensor:
    return batch_losses(model, batch, temperature, terms=("back_rec",))["back_rec"]


def loss_class_btd(batch: Batch, model: TransferModel, temperature: float = 1.0) -> ad.Tensor:
    return batch_losses(model, batch, temperature, terms=("class_btd",))["class_btd"]


def joint_objective(model: TransferModel, batches: tuple[Batch, ...], config: TrainConfig,
                    temperature: float, terms=TERMS) -> tuple[ad.Tensor, LossBreakdown]:
    """Weighted sum of the loss terms, each averaged over the given single-style batches."""
    per_term: dict[str, list[ad.Tensor]] = {t: [] for t in terms}
    for b in batches:
        for name, val in batch_losses(model, b, temperature, not config.no_back_transfer,
                                      config.max_gen_len, terms).items():
            per_term[name].append(val)
    total = None
    breakdown = LossBreakdown()
    for name in terms:
        vals = per_term[name]
        if not vals:
            continue
        term = vals[0] if len(vals) == 1 else ad.mul(_sum(vals), 1.0 / len(vals))
        value = term.item()
        if not math.isfinite(value):
            raise NumericalError(name, value)
        setattr(breakdown, name, value)
        weighted = ad.mul(term, config.weight(name))
        total = weighted if total is None else ad.add(total, weighted)
    breakdown.total = total.item() if total is not None else 0.0
    return total, breakdown


def _sum(vals):
    acc = vals[0]
    for v in vals[1:]:
        acc = ad.add(acc, v)
    return acc


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in params if t.grad is not None))
    if norm > max_norm:
        for t in params:
            if t.grad is not None:
                t.grad *= max_norm / norm
    return norm


def train_step(batch0: Batch, batch1: Batch, model: TransferModel, optimizer: ad.Adam, config: TrainConfig,
               temperature: float | None = None, terms=TERMS) -> LossBreakdown:
    """All loss terms over both directions, one backward pass, one joint Adam step."""
    temperature = config.temperature if temperature is None else temperature
    optimizer.zero_grad()
    with ad.Tape() as tape:
        total, breakdown = joint_objective(model, (batch0, batch1), config, temperature, terms)
    ad.backward(total, tape)
    if config.clip_norm > 0:
        clip_grad_norm(model.parameters(), config.clip_norm)
    optimizer.step()
    return breakdown


def evaluate_losses(model: TransferModel, corpus: StyledCorpus, split: str, config: TrainConfig,
                    temperature: float) -> LossBreakdown:
    with ad.no_grad():
        items = [joint_objective(model, pair, config, temperature)[1]
                 for pair in paired_batches(corpus, split, config.batch_size)]
    return LossBreakdown.mean(items)


@dataclass
class TrainResult:
    model: TransferModel
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev: float = math.inf

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER] + [e.line() for e in self.epochs]) + "\n"


def train(corpus: StyledCorpus, config: TrainConfig, checkpoint_path=None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Warm up the classifier (and optionally the autoencoder), then train jointly.

    Joint epochs use dev-loss early stopping. The returned model holds the parameters of the best dev epoch. With
    ``checkpoint_path`` the best model is also written each time it improves.
    """
    from .checkpoint import save_checkpoint

    if not all(corpus.split(s, k) for s in ("train", "dev") for k in (0, 1)):
        raise ValueError("train: corpus needs non-empty train and dev splits for both styles")
    model = TransferModel(config.model_config(len(corpus.vocab)), seed=config.seed)
    optimizer = ad.Adam(model.parameters(), lr=config.lr)
    rng = ad.seeded_rng(config.seed + 1)
    result = TrainResult(model)

    warmups = [("class_od",)] * config.warmup_epochs + [("rec", "class_od")] * config.ae_warmup_epochs
    for terms in warmups:
        for b0, b1 in paired_batches(corpus, "train", config.batch_size, rng):
            train_step(b0, b1, model, optimizer, config, terms=terms)

    best = model.state_arrays()
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        tau = config.temperature_at(epoch)
        try:
            steps = [train_step(b0, b1, model, optimizer, config, tau)
                     for b0, b1 in paired_batches(corpus, "train", config.batch_size, rng)]
            # a fixed temperature keeps dev totals comparable across epochs
            dev = evaluate_losses(model, corpus, "dev", config, config.temperature_floor).total
            if not math.isfinite(dev):
                raise DivergenceError("dev_total", dev, where=f"epoch {epoch}")
        except NumericalError:
            model.load_arrays(best)
            raise
        rec = EpochRecord(epoch, LossBreakdown.mean(steps), dev, tau)
        result.epochs.append(rec)
        log.info("epoch %d  train %.4f  dev %.4f  tau %.3f", epoch, rec.train.total, dev, tau)
        if on_epoch is not None:
            on_epoch(rec)
        if dev < result.best_dev:
            result.best_dev, result.best_epoch = dev, epoch
            best = model.state_arrays()
            stale = 0
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, corpus.vocab)
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_arrays(best)
    return result


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["widths"] = list(config.widths)
    return d
