"""Encoder, attention decoder and CNN classifier over the autodiff core.

All functions are batched: token inputs are ``(B, T)`` id matrices with a
``lengths`` vector, and generated sentences are :class:`SoftSequence` rows of
probabilities over the vocabulary. A single encoder, a single decoder and one
classifier serve both styles; the style enters only through a learned style
embedding used as the initial hidden state of the encoder and of the decoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, PAD, MAX_LEN

MAX_GEN_LEN = MAX_LEN + 1


@dataclass
class ModelConfig:
    vocab_size: int
    emb: int = 100
    hidden: int = 200
    filters: int = 128
    widths: tuple[int, ...] = (1, 2, 3, 4)
    attention: bool = True
    init_scale: float = 0.08

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


# ---------------------------------------------------------------- cells


def gru_params(rng, n_in: int, n_hidden: int, prefix: str, scale: float = 0.08) -> dict[str, Tensor]:
    p = {}
    for gate in ("z", "r", "h"):
        p[f"{prefix}W_{gate}"] = ad.uniform_param(rng, (n_in + n_hidden, n_hidden), scale)
        p[f"{prefix}b_{gate}"] = ad.zeros_param((n_hidden,))
    return p


def gru_cell(x: Tensor, h: Tensor, params: dict[str, Tensor], prefix: str = "") -> Tensor:
    """z = sig(W_z[x;h]+b_z), r = sig(W_r[x;h]+b_r), h~ = tanh(W_h[x; r*h]+b_h), h' = (1-z)h + z h~."""
    W_z, W_r, W_h = params[prefix + "W_z"], params[prefix + "W_r"], params[prefix + "W_h"]
    n_hidden = W_z.shape[1]
    if h.shape[-1] != n_hidden or x.shape[-1] + n_hidden != W_z.shape[0]:
        raise ad.ShapeError("gru_cell", x.shape, h.shape, W_z.shape)
    xh = ad.concat([x, h], axis=-1)
    z = ad.sigmoid(ad.add(ad.matmul(xh, W_z), params[prefix + "b_z"]))
    r = ad.sigmoid(ad.add(ad.matmul(xh, W_r), params[prefix + "b_r"]))
    xrh = ad.concat([x, ad.mul(r, h)], axis=-1)
    cand = ad.tanh(ad.add(ad.matmul(xrh, W_h), params[prefix + "b_h"]))
    return ad.add(h, ad.mul(z, ad.sub(cand, h)))


def lstm_params(rng, n_in: int, n_hidden: int, prefix: str, scale: float = 0.08) -> dict[str, Tensor]:
    return {
        f"{prefix}W": ad.uniform_param(rng, (n_in + n_hidden, 4 * n_hidden), scale),
        f"{prefix}b": ad.zeros_param((4 * n_hidden,)),
    }


def lstm_cell(x: Tensor, state: tuple[Tensor, Tensor], params: dict[str, Tensor],
              prefix: str = "") -> tuple[Tensor, Tensor]:
    """Standard LSTM; the gate columns of ``W`` are ordered input, forget, output, candidate."""
    h, c = state
    W = params[prefix + "W"]
    n = W.shape[1] // 4
    if h.shape[-1] != n or x.shape[-1] + n != W.shape[0]:
        raise ad.ShapeError("lstm_cell", x.shape, h.shape, W.shape)
    gates = ad.add(ad.matmul(ad.concat([x, h], axis=-1), W), params[prefix + "b"])
    i = ad.sigmoid(gates[..., :n])
    f = ad.sigmoid(gates[..., n : 2 * n])
    o = ad.sigmoid(gates[..., 2 * n : 3 * n])
    g = ad.tanh(gates[..., 3 * n :])
    c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
    return ad.mul(o, ad.tanh(c2)), c2


def _carry(h_prev: Tensor, h_new: Tensor, step_mask: np.ndarray) -> Tensor:
    # keep the previous state for rows whose sentence already ended
    if step_mask.all():
        return h_new
    return ad.add(h_prev, ad.mul(ad.sub(h_new, h_prev), step_mask[:, None]))


# ---------------------------------------------------------------- classifier


class CNNClassifier:
    """Convolution over word embeddings, tanh, max over time, linear to two logits."""

    def __init__(self, vocab_size: int, emb: int, filters: int, widths=(1, 2, 3, 4), rng=None,
                 scale: float = 0.08, prefix: str = "cls."):
        rng = ad.seeded_rng(0) if rng is None else rng
        self.widths = tuple(widths)
        self.prefix = prefix
        p = {f"{prefix}emb": ad.normal_param(rng, (vocab_size, emb))}
        for w in self.widths:
            p[f"{prefix}conv{w}.W"] = ad.uniform_param(rng, (w * emb, filters), scale)
            p[f"{prefix}conv{w}.b"] = ad.zeros_param((filters,))
        p[f"{prefix}out.W"] = ad.uniform_param(rng, (len(self.widths) * filters, 2), scale)
        p[f"{prefix}out.b"] = ad.zeros_param((2,))
        self.params = p

    @property
    def embedding(self) -> Tensor:
        return self.params[self.prefix + "emb"]

    def embed(self, inputs) -> tuple[Tensor, np.ndarray]:
        if isinstance(inputs, SoftSequence):
            return ad.matmul(inputs.probs, self.embedding), inputs.lengths
        ids, lengths = inputs
        return ad.embedding_lookup(self.embedding, ids), np.asarray(lengths)

    def logits(self, inputs) -> Tensor:
        """``inputs`` is ``(ids, lengths)`` or a :class:`SoftSequence`; returns ``(B, 2)``."""
        X, lengths = self.embed(inputs)
        B, L, _ = X.shape
        p, pre = self.params, self.prefix
        span = max(L, max(self.widths))
        if span > L:
            X = ad.concat([X, ad.embedding_lookup(self.embedding, np.full((B, span - L), PAD))], axis=1)
        pos_mask = (np.arange(span)[None, :] < lengths[:, None]).astype(np.float64)[..., None]
        pad_row = ad.embedding_lookup(self.embedding, np.array([PAD]))
        X = ad.add(ad.mul(X, pos_mask), ad.mul(pad_row, 1.0 - pos_mask))
        # shorter sentences count as padded to the widest filter
        eff_len = np.maximum(lengths, max(self.widths))
        feats = []
        for w in self.widths:
            n_win = span - w + 1
            win = ad.concat([X[:, k : k + n_win, :] for k in range(w)], axis=2) if w > 1 else X
            conv = ad.tanh(ad.add(ad.matmul(win, p[f"{pre}conv{w}.W"]), p[f"{pre}conv{w}.b"]))
            valid = np.arange(n_win)[None, :] <= (eff_len - w)[:, None]
            feats.append(ad.max_over_time(conv, axis=1, mask=valid))
        return ad.add(ad.matmul(ad.concat(feats, axis=1), p[f"{pre}out.W"]), p[f"{pre}out.b"])

    def predict(self, ids_list: list[list[int]]) -> np.ndarray:
        from .corpus import make_batch

        with ad.no_grad():
            b = make_batch([s if s else [PAD] for s in ids_list], 0)
            return np.argmax(self.logits((b.ids, b.lengths)).data, axis=1)


# ---------------------------------------------------------------- transfer model


@dataclass
class EncoderOutput:
    H: Tensor  # (B, T, hidden)
    final: Tensor  # (B, hidden)
    mask: np.ndarray  # (B, T)
    proj: Tensor | None = None  # H projected for attention


@dataclass
class SoftSequence:
    """Generated sentences as probability rows; ``lengths`` counts rows before the stop step."""

    probs: Tensor  # (B, L, V)
    lengths: np.ndarray
    stops: np.ndarray = field(default=None)

    def argmax(self) -> list[list[int]]:
        best = np.argmax(self.probs.data, axis=-1)
        return [list(best[i, : self.lengths[i]]) for i in range(len(self.lengths))]

    @classmethod
    def one_hot(cls, ids: np.ndarray, lengths, vocab_size: int) -> "SoftSequence":
        ids = np.asarray(ids)
        probs = np.zeros(ids.shape + (vocab_size,))
        np.put_along_axis(probs, ids[..., None], 1.0, axis=-1)
        return cls(Tensor(probs), np.asarray(lengths))


class TransferModel:
    """Word/style embeddings, GRU encoder, attention GRU decoder, output layer and classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        rng = ad.seeded_rng(seed)
        s = c.init_scale
        p: dict[str, Tensor] = {
            "emb": ad.normal_param(rng, (c.vocab_size, c.emb)),
            "style": ad.uniform_param(rng, (2, c.hidden), s),
        }
        p.update(gru_params(rng, c.emb, c.hidden, "enc.", s))
        p.update(gru_params(rng, c.emb + c.hidden, c.hidden, "dec.", s))
        p["att.W"] = ad.uniform_param(rng, (c.hidden, c.hidden), s)
        p["att.U"] = ad.uniform_param(rng, (c.hidden, c.hidden), s)
        p["att.v"] = ad.uniform_param(rng, (c.hidden, 1), s)
        p["out.W"] = ad.uniform_param(rng, (c.hidden, c.vocab_size), s)
        p["out.b"] = ad.zeros_param((c.vocab_size,))
        self.classifier = CNNClassifier(c.vocab_size, c.emb, c.filters, c.widths, rng, s)
        p.update(self.classifier.params)
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def is_classifier_param(self, name: str) -> bool:
        return name.startswith(self.classifier.prefix)


def _style_state(model: TransferModel, styles) -> Tensor:
    return ad.embedding_lookup(model.params["style"], np.asarray(styles, dtype=np.int64))


def _batchify(inputs):
    if isinstance(inputs, (SoftSequence, tuple)):
        return inputs
    ids = np.asarray(inputs, dtype=np.int64)[None, :]
    return ids, np.array([ids.shape[1]])


def encode(model: TransferModel, inputs, styles) -> EncoderOutput:
    """Run the encoder from the style embedding over hard ids or a soft sequence.

    ``inputs`` is ``(ids, lengths)``, a single id list, or a :class:`SoftSequence`
    whose rows are mixed into expected embeddings.
    """
    inputs = _batchify(inputs)
    E = model.params["emb"]
    if isinstance(inputs, SoftSequence):
        X, lengths = ad.matmul(inputs.probs, E), inputs.lengths
    else:
        ids, lengths = inputs
        X = ad.embedding_lookup(E, ids)
    lengths = np.asarray(lengths)
    B, T = X.shape[0], X.shape[1]
    if T == 0 or lengths.min() < 1:
        raise ValueError("encode: empty input sentence")
    styles = np.broadcast_to(np.asarray(styles), (B,))
    h = _style_state(model, styles)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    states = []
    for t in range(T):
        h = _carry(h, gru_cell(X[:, t, :], h, model.params, "enc."), mask[:, t])
        states.append(h)
    H = ad.stack(states, axis=1)
    proj = ad.matmul(H, model.params["att.U"]) if model.config.attention else None
    return EncoderOutput(H, h, mask, proj)


def attend(model: TransferModel, s: Tensor, enc: EncoderOutput) -> tuple[Tensor, Tensor]:
    """Additive attention: weights = softmax(v . tanh(W s + U h_t)) over unpadded positions."""
    B, T, _ = enc.H.shape
    proj = enc.proj if enc.proj is not None else ad.matmul(enc.H, model.params["att.U"])
    q = ad.reshape(ad.matmul(s, model.params["att.W"]), (B, 1, -1))
    scores = ad.reshape(ad.matmul(ad.tanh(ad.add(proj, q)), model.params["att.v"]), (B, T))
    weights = ad.softmax(ad.add(scores, (1.0 - enc.mask) * ad.MASK_NEG), axis=1)
    context = ad.sum_(ad.mul(ad.reshape(weights, (B, T, 1)), enc.H), axis=1)
    return context, weights


def decoder_step(model: TransferModel, x: Tensor, s: Tensor, enc: EncoderOutput) -> tuple[Tensor, Tensor]:
    """One decoder step; without attention the final encoder state is the fixed context."""
    context = attend(model, s, enc)[0] if model.config.attention else enc.final
    s = gru_cell(ad.concat([x, context], axis=-1), s, model.params, "dec.")
    logits = ad.add(ad.matmul(s, model.params["out.W"]), model.params["out.b"])
    return s, logits


def decode_teacher_forced(model: TransferModel, enc: EncoderOutput, styles, inputs: np.ndarray) -> Tensor:
    """Logits ``(B, T, V)`` for decoder input ids (BOS followed by the reference)."""
    B, T = inputs.shape
    s = _style_state(model, np.broadcast_to(np.asarray(styles), (B,)))
    E = model.params["emb"]
    steps = []
    for t in range(T):
        s, logits = decoder_step(model, ad.embedding_lookup(E, inputs[:, t]), s, enc)
        steps.append(logits)
    return ad.stack(steps, axis=1)


def decode_soft(model: TransferModel, enc: EncoderOutput, styles, temperature: float = 1.0,
                max_gen_len: int = MAX_GEN_LEN) -> SoftSequence:
    """Differentiable generation feeding back the expected embedding of each step's distribution."""
    if temperature <= 0:
        raise ValueError("decode_soft: temperature must be positive")
    B = enc.H.shape[0]
    E = model.params["emb"]
    s = _style_state(model, np.broadcast_to(np.asarray(styles), (B,)))
    x = ad.embedding_lookup(E, np.full(B, BOS))
    stops = np.full(B, max_gen_len)
    rows = []
    for t in range(max_gen_len):
        s, logits = decoder_step(model, x, s, enc)
        probs = ad.softmax(ad.mul(logits, 1.0 / temperature), axis=-1)
        rows.append(probs)
        ended = (np.argmax(logits.data, axis=-1) == EOS) & (stops == max_gen_len)
        stops[ended] = t
        if (stops < max_gen_len).all():
            break
        x = ad.matmul(probs, E)
    return SoftSequence(ad.stack(rows, axis=1), np.maximum(stops, 1), stops)


def decode_greedy(model: TransferModel, enc: EncoderOutput, styles,
                  max_gen_len: int = MAX_GEN_LEN) -> list[list[int]]:
    """Argmax decoding until EOS or ``max_gen_len`` steps; EOS is not returned."""
    with ad.no_grad():
        B = enc.H.shape[0]
        E = model.params["emb"]
        s = _style_state(model, np.broadcast_to(np.asarray(styles), (B,)))
        tok = np.full(B, BOS)
        out = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(max_gen_len):
            s, logits = decoder_step(model, ad.embedding_lookup(E, tok), s, enc)
            tok = np.argmax(logits.data, axis=-1)
            for i in np.flatnonzero(~done):
                if tok[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(tok[i]))
            if done.all():
                break
        return out


def classify(model: TransferModel, inputs) -> Tensor:
    """Classifier logits ``(B, 2)`` for ``(ids, lengths)``, an id list, or a soft sequence."""
    return model.classifier.logits(_batchify(inputs))


def transfer(model: TransferModel, sentences: list[list[int]], source_style: int = 0,
             target_style: int | None = None, batch_size: int = 64) -> list[list[int]]:
    """Greedy style transfer of id sequences; empty inputs give empty outputs."""
    from .corpus import make_batch

    target_style = 1 - source_style if target_style is None else target_style
    out: list[list[int]] = [[] for _ in sentences]
    idx = [i for i, s in enumerate(sentences) if len(s) > 0]
    with ad.no_grad():
        for k in range(0, len(idx), batch_size):
            chunk = idx[k : k + batch_size]
            b = make_batch([sentences[i] for i in chunk], source_style)
            enc = encode(model, (b.ids, b.lengths), source_style)
            for i, seq in zip(chunk, decode_greedy(model, enc, target_style)):
                out[i] = seq
    return out
