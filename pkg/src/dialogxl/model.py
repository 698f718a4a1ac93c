"""The DialogXL stack: embedding, dialog-aware layers with memory, and the [CLS] classifier."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import (ConfigurationError, HeadAllocation, build_masks, dialog_aware_layer,
                        layer_param_shapes, sinusoid_table)
from .data import CLS, PAD, Conversation, LabelSet, Utterance, Vocabulary, encode_input
from .memory import MemoryBank, retained_windows

CHECKPOINT_FORMAT = "dialogxl-checkpoint"
CHECKPOINT_VERSION = 1

MODES = ("dialog_attention", "speaker_embedding")


class SequencingError(RuntimeError):
    pass


class UnknownSpeakerError(KeyError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    n_labels: int
    d: int = 48  # 12 default heads of width 4
    n_layers: int = 2
    alloc: tuple = (2, 2, 4, 4)
    window: float = 2
    max_mem: float = math.inf
    dropout: float = 0.1
    precision: str = "float64"
    mode: str = "dialog_attention"
    n_speakers: int = 4
    residual: bool = True
    whole_utterance_truncation: bool = False

    def __post_init__(self):
        self.alloc = tuple(HeadAllocation.parse(self.alloc).counts)
        if self.window is None:
            self.window = math.inf
        if self.max_mem is None:
            self.max_mem = math.inf
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError(f"precision must be float64 or float32, got {self.precision!r}")
        for name in ("vocab_size", "n_labels", "d", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.d % self.n_heads:
            raise ConfigurationError(f"hidden size {self.d} not divisible by {self.n_heads} heads")
        if self.max_mem < 0 or self.window < 0:
            raise ConfigurationError("max_mem and window must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @property
    def n_heads(self):
        return sum(self.alloc)

    @property
    def allocation(self):
        return HeadAllocation(*self.alloc)

    @property
    def effective_allocation(self):
        """Head allocation actually run; role-embedding mode turns speaker/listener heads global."""
        a = self.allocation
        if self.mode == "speaker_embedding":
            return HeadAllocation(a.global_ + a.speaker + a.listener, a.local, 0, 0)
        return a

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_json(self):
        out = asdict(self)
        out["alloc"] = list(self.alloc)
        for key in ("window", "max_mem"):
            if math.isinf(out[key]):
                out[key] = None
        return out

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class Prediction:
    probs: np.ndarray
    label: int
    pooled: np.ndarray
    logits: nx.Tensor = field(repr=False, default=None)


def predict(probs):
    """Arg-max label; ties go to the smallest id."""
    return int(np.argmax(np.asarray(probs)))


def loss(logits, gold, literal=False):
    """Mean over utterances of -log P[y]; ``literal`` uses -mean P[y] instead."""
    gold = np.asarray(gold, dtype=np.int64)
    if literal:
        probs = nx.softmax_rows(logits)
        if gold.size and (gold.min() < 0 or gold.max() >= logits.shape[-1]):
            raise ValueError(f"label out of range [0, {logits.shape[-1]})")
        picked = nx.index_pairs(probs, np.arange(gold.size), gold)
        return nx.mul(nx.tsum(picked), -1.0 / gold.size)
    return nx.cross_entropy(logits, gold)


class DialogXLModel:
    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.dtype = config.dtype
        self.alloc = config.effective_allocation
        self.training = False
        self.rng = np.random.default_rng(seed)
        init = np.random.default_rng(seed)
        self.params = {}
        d = config.d

        def p(name, arr):
            self.params[name] = nx.Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

        p("embed", init.normal(0.0, 1.0, (config.vocab_size, d)))
        if config.mode == "speaker_embedding":
            p("role_embed", init.normal(0.0, 1.0, (config.n_speakers, d)))
        for layer in range(config.n_layers):
            for name, shape in layer_param_shapes(d, config.n_heads).items():
                if name in ("u", "v_bias", "ln_b", "ff1_b", "ff2_b"):
                    arr = np.zeros(shape)
                elif name == "ln_g":
                    arr = np.ones(shape)
                else:
                    arr = init.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
                p(f"layers.{layer}.{name}", arr)
        p("cls.wh", init.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
        p("cls.bh", np.zeros(d))
        p("cls.wz", init.normal(0.0, 1.0 / math.sqrt(d), (d, config.n_labels)))
        p("cls.bz", np.zeros(config.n_labels))
        self._rel = np.zeros((0, d), dtype=self.dtype)

    # -- helpers -----------------------------------------------------------

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def layer_params(self, layer):
        prefix = f"layers.{layer}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def rel_table(self, n_dist):
        if self._rel.shape[0] < n_dist:
            size = max(64, 1 << (int(n_dist) - 1).bit_length())
            self._rel = sinusoid_table(size, self.config.d, self.dtype)
        return self._rel

    def new_bank(self):
        return MemoryBank(self.config.n_layers, self.config.d, self.config.max_mem,
                          self.config.whole_utterance_truncation, self.dtype)

    def _check_speakers(self, speakers):
        if self.config.mode != "speaker_embedding":
            return
        bad = [s for s in np.ravel(speakers) if s >= self.config.n_speakers]
        if bad:
            raise UnknownSpeakerError(
                f"speaker id {bad[0]} has no role embedding (table size {self.config.n_speakers})")

    # -- forward -----------------------------------------------------------

    def embed(self, ids, speakers=None):
        """Word embedding of ``ids``; in role-embedding mode the speaker's vector is added."""
        out = nx.embedding(self.params["embed"], ids)
        if self.config.mode == "speaker_embedding":
            if speakers is None:
                raise ValueError("role-embedding mode needs speaker ids")
            self._check_speakers(speakers)
            out = nx.add(out, nx.embedding(self.params["role_embed"], speakers))
        return out

    def _classify(self, pooled):
        z = nx.relu(nx.add(nx.matmul(pooled, self.params["cls.wh"]), self.params["cls.bh"]))
        return nx.add(nx.matmul(z, self.params["cls.wz"]), self.params["cls.bz"])

    def forward_utterance(self, bank: MemoryBank, u: Utterance, t: int, return_weights=False):
        """Classify utterance ``t`` given the conversation's memory bank, then grow the bank."""
        expected = bank.processed
        if t != expected:
            raise SequencingError(f"expected utterance {expected}, got {t}")
        cfg = self.config
        ids = encode_input(u)
        n_t = len(ids) - 1
        x = self.embed(np.asarray(ids)[None, :], np.full((1, len(ids)), u.speaker_id))
        h = nx.reshape(x, (len(ids), cfg.d))
        meta = bank.meta
        m = len(meta)
        masks = build_masks(n_t, meta, t, u.speaker_id, cfg.window)
        visible = {c: ~mk for c, mk in masks.items()}
        dist = (m + np.arange(1 + n_t))[:, None] - np.arange(m + 1 + n_t)[None, :]
        rel = self.rel_table(int(dist.max()) + 1)
        inputs = []
        weights = []
        for layer in range(cfg.n_layers):
            inputs.append(h.data)
            mem = nx.Tensor(bank.hidden[layer])
            res = dialog_aware_layer(h, self.layer_params(layer), visible, dist, self.alloc, rel,
                                     memory=mem, residual=cfg.residual, dropout=cfg.dropout,
                                     rng=self.rng, training=self.training,
                                     return_weights=return_weights)
            if return_weights:
                h, w = res
                weights.append(w.data)
            else:
                h = res
        for layer, h_in in enumerate(inputs):
            bank.update(layer, h_in, t, u.speaker_id)
        bank.truncate()
        bank.processed = t + 1
        pooled = nx.index_rows(h, np.array([0]))
        logits = self._classify(pooled)
        probs = np.exp(logits.data[0] - logits.data[0].max())
        probs /= probs.sum()
        pred = Prediction(probs, predict(probs), h.data[0].copy(), logits)
        if return_weights:
            return pred, weights
        return pred

    def forward_conversation(self, conv: Conversation):
        """Per-utterance pass over a whole conversation with a fresh bank; returns Predictions."""
        bank = self.new_bank()
        return [self.forward_utterance(bank, u, t) for t, u in enumerate(conv.utterances)]

    def batch_layout(self, convs):
        """Token layout arrays for a batch of conversations processed in one pass."""
        cfg = self.config
        seqs = []
        for conv in convs:
            rows = []
            start = 0
            lengths = [len(u.tokens) for u in conv.utterances]
            windows = retained_windows(lengths, cfg.max_mem, cfg.whole_utterance_truncation)
            for t, u in enumerate(conv.utterances):
                lo = windows[t][0]
                for o, tok in enumerate(encode_input(u)):
                    g = start + o - 1 if o > 0 else -1
                    rows.append((tok, u.speaker_id, t, o, start, g, lo))
                start += len(u.tokens)
            seqs.append(rows)
        b, width = len(seqs), max(len(s) for s in seqs)
        lay = np.zeros((7, b, width), dtype=np.int64)
        lay[0] = PAD
        lay[2] = -1
        lay[5] = -1
        valid = np.zeros((b, width), dtype=bool)
        for i, rows in enumerate(seqs):
            lay[:, i, :len(rows)] = np.asarray(rows, dtype=np.int64).T
            valid[i, :len(rows)] = True
        ids, spk, utt, off, start, g, lo = lay
        return dict(ids=ids, spk=spk, utt=utt, off=off, start=start, g=g, lo=lo, valid=valid)

    def batch_masks(self, lay):
        """Visibility per head type, same-utterance selector and distances for a batch layout."""
        cfg = self.config
        q = {k: v[:, :, None] for k, v in lay.items()}
        k = {kk: v[:, None, :] for kk, v in lay.items()}
        vq, vk = q["valid"], k["valid"]
        same = (q["utt"] == k["utt"]) & vq & vk
        mem = vq & vk & (k["utt"] < q["utt"]) & (k["g"] >= 0) & (k["g"] >= q["lo"])
        width = lay["ids"].shape[1]
        pad_self = ~lay["valid"][:, :, None] & np.eye(width, dtype=bool)[None]
        same = same | pad_self
        spk_same = q["spk"] == k["spk"]
        visible = {
            "global": same | mem,
            "local": same | (mem & (k["utt"] >= q["utt"] - cfg.window)),
            "speaker": same | (mem & spk_same),
            "listener": same | (mem & ~spk_same),
        }
        dist = np.where(same, q["off"] - k["off"], q["start"] + q["off"] - k["g"])
        dist = np.where(same | mem, np.maximum(dist, 0), 0)
        return visible, same, dist

    def forward_batch(self, convs, return_weights=False):
        """Logits for every utterance of every conversation in one batched pass.

        Numerically equivalent to running :meth:`forward_utterance` in order with
        a fresh bank per conversation: history enters attention only through
        detached keys and values, exactly as cached memory would.

        Returns ``(logits (N, C), gold labels (N,), index [(conv, utt)])``; the
        gold entry is -1 for unlabelled utterances.
        """
        cfg = self.config
        lay = self.batch_layout(convs)
        visible, same, dist = self.batch_masks(lay)
        b, width = lay["ids"].shape
        x = self.embed(lay["ids"], lay["spk"] if cfg.mode == "speaker_embedding" else None)
        h = x
        rel = self.rel_table(int(dist.max()) + 1)
        weights = []
        for layer in range(cfg.n_layers):
            res = dialog_aware_layer(h, self.layer_params(layer), visible, dist, self.alloc, rel,
                                     same_block=same, residual=cfg.residual, dropout=cfg.dropout,
                                     rng=self.rng, training=self.training,
                                     return_weights=return_weights)
            if return_weights:
                h, w = res
                weights.append(w.data)
            else:
                h = res
        cls_pos = np.nonzero(lay["valid"] & (lay["off"] == 0))
        flat = nx.reshape(h, (b * width, cfg.d))
        pooled = nx.index_rows(flat, cls_pos[0] * width + cls_pos[1])
        logits = self._classify(pooled)
        index = [(int(i), int(lay["utt"][i, j])) for i, j in zip(*cls_pos)]
        gold = np.array([-1 if convs[i].utterances[t].label is None else convs[i].utterances[t].label
                         for i, t in index], dtype=np.int64)
        if return_weights:
            return logits, gold, index, weights, visible
        return logits, gold, index

    def predict_batch(self, convs, batch_size=32):
        """Predicted label ids, gold ids and (conv, utt) index over a dataset (no gradient)."""
        was = self.training
        self.eval()
        preds, golds, index = [], [], []
        with nx.no_grad():
            for i in range(0, len(convs), batch_size):
                chunk = convs[i:i + batch_size]
                logits, gold, idx = self.forward_batch(chunk)
                preds.append(np.argmax(logits.data, axis=-1))
                golds.append(gold)
                index.extend((a + i, t) for a, t in idx)
        self.train(was)
        return np.concatenate(preds), np.concatenate(golds), index


def speaker_embedding_mode(model: DialogXLModel, n_speakers=None, seed=0):
    """A role-embedding variant of ``model``'s configuration (fresh parameters)."""
    cfg = ModelConfig.from_json(model.config.to_json())
    cfg.mode = "speaker_embedding"
    if n_speakers is not None:
        cfg.n_speakers = n_speakers
    return DialogXLModel(cfg, seed)


# -- checkpoints -------------------------------------------------------------

def checkpoint_dict(model: DialogXLModel, vocab: Vocabulary, labels: LabelSet, speakers=None, extra=None):
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "vocab": vocab.to_json(),
        "labels": labels.to_json(),
        "excluded_label": labels.excluded_label,
        "speakers": dict(speakers or {}),
        "params": {name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                   for name, t in model.params.items()},
    }
    if extra:
        obj["extra"] = extra
    return obj


def save_checkpoint(path, model, vocab, labels, speakers=None, extra=None):
    text = json.dumps(checkpoint_dict(model, vocab, labels, speakers, extra), sort_keys=True)
    Path(path).write_text(text)


def load_checkpoint(path):
    """Returns ``(model, vocab, labels, speakers)``."""
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a DialogXL checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
    cfg = ModelConfig.from_json(obj["config"])
    model = DialogXLModel(cfg)
    for name, rec in obj["params"].items():
        if name not in model.params:
            raise ValueError(f"unexpected parameter {name!r} in checkpoint")
        arr = np.asarray(rec["data"], dtype=model.dtype).reshape(rec["shape"])
        if arr.shape != model.params[name].shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {model.params[name].shape}")
        model.params[name].data = arr
    vocab = Vocabulary.from_json(obj["vocab"])
    labels = LabelSet.from_json(obj["labels"], obj.get("excluded_label"))
    return model, vocab, labels, obj.get("speakers", {})
