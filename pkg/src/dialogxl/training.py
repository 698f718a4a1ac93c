"""Training and evaluation loops, memory-waste analysis, ablations and mask dumps."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import HEAD_TYPES, HeadAllocation, build_masks
from .data import CLS, Conversation, DataError, LabelSet, Vocabulary, load_conversations
from .memory import MemoryBank, SegmentMemory
from .metrics import evaluation_report
from .model import DialogXLModel, ModelConfig, load_checkpoint, loss as loss_fn, save_checkpoint

log = logging.getLogger(__name__)

METRICS = ("weighted_f1", "micro_f1", "accuracy")


class NumericFailure(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    train: str | None = None
    val: str | None = None
    model: dict = field(default_factory=dict)
    epochs: int = 20
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 0.01
    seed: int = 0
    patience: int = 5
    metric: str = "weighted_f1"
    exclude_label: str | None = None
    literal_loss: bool = False
    out: str | None = None
    log: str | None = None

    def __post_init__(self):
        if self.metric == "micro_f1_excluding":
            self.metric = "micro_f1"
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs must be >= 0; batch_size and patience must be positive")

    @classmethod
    def from_file(cls, path):
        obj = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        model = dict(obj.pop("model", {}))
        for key in list(obj):
            if key not in known:
                model[key] = obj.pop(key)
        cfg = cls(model=model, **obj)
        base = Path(path).parent
        for key in ("train", "val", "out", "log"):
            val = getattr(cfg, key)
            if val is not None and not Path(val).is_absolute():
                setattr(cfg, key, str(base / val))
        return cfg


@dataclass
class TrainResult:
    model: DialogXLModel
    log: list
    best_epoch: int
    best_metric: float

    def log_csv(self):
        return format_log(self.log)


def format_log(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_metric", "val_accuracy"])
    for r in rows:
        loss = "" if r["train_loss"] is None else repr(r["train_loss"])
        writer.writerow([r["epoch"], loss, repr(r["val_metric"]), repr(r["val_accuracy"])])
    return buf.getvalue()


def _flatten_rules(convs, index):
    return [convs[c].utterances[t].rule for c, t in index]


def evaluate_model(model: DialogXLModel, convs, labels: LabelSet, excluded=None, batch_size=32):
    """Evaluate on labelled conversations; returns an :class:`EvalReport`."""
    pred, gold, index = model.predict_batch(convs, batch_size)
    keep = gold >= 0
    if not keep.any():
        raise DataError("no labelled utterances to evaluate")
    rules = np.asarray(_flatten_rules(convs, index), dtype=object)[keep]
    has_rules = any(r is not None for r in rules)
    return evaluation_report(gold[keep], pred[keep], labels.itos, excluded,
                             rules if has_rules else None)


def train_model(train_convs, val_convs, n_vocab, labels: LabelSet, model_cfg: dict | ModelConfig,
                cfg: TrainConfig, n_speakers=None, progress=None) -> TrainResult:
    """AdamW training with hold-out selection of the best epoch.

    Epoch 0 is the untrained model's validation score.  Training stops once
    the validation metric fails to improve for ``cfg.patience`` epochs and the
    best parameters are restored.
    """
    if not train_convs:
        raise DataError("empty training set")
    if not val_convs:
        raise DataError("empty validation set")
    if isinstance(model_cfg, ModelConfig):
        mcfg = model_cfg
    else:
        kwargs = dict(model_cfg)
        kwargs.setdefault("n_speakers", n_speakers or 4)
        mcfg = ModelConfig(vocab_size=n_vocab, n_labels=len(labels), **kwargs)
    model = DialogXLModel(mcfg, seed=cfg.seed)
    opt = nx.AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed + 7919)
    excluded = cfg.exclude_label or labels.excluded_label

    def validate():
        rep = evaluate_model(model, val_convs, labels, excluded)
        return rep.metric(cfg.metric), rep.accuracy

    metric, acc = validate()
    rows = [{"epoch": 0, "train_loss": None, "val_metric": metric, "val_accuracy": acc}]
    best = (metric, 0, {k: t.data.copy() for k, t in model.params.items()})
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total, count = 0.0, 0
        for start, idx in enumerate(bucketed_batches(train_convs, cfg.batch_size, order_rng)):
            batch = [train_convs[i] for i in idx]
            model.zero_grad()
            with nx.Tape() as tape:
                logits, gold, _ = model.forward_batch(batch)
                keep = np.nonzero(gold >= 0)[0]
                if keep.size == 0:
                    continue
                picked = nx.index_rows(logits, keep)
                value = loss_fn(picked, gold[keep], literal=cfg.literal_loss)
            if not np.isfinite(value.data):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, batch {start}")
            nx.backward(tape, value)
            try:
                nx.adamw_step(opt, model.params)
            except nx.NonFiniteGradientError as e:
                raise NumericFailure(str(e)) from e
            total += float(value.data) * keep.size
            count += keep.size
        model.eval()
        metric, acc = validate()
        rows.append({"epoch": epoch, "train_loss": total / max(count, 1),
                     "val_metric": metric, "val_accuracy": acc})
        if progress:
            progress(rows[-1])
        log.info("epoch %d loss %.4f val %s %.4f", epoch, rows[-1]["train_loss"], cfg.metric, metric)
        if metric > best[0]:
            best = (metric, epoch, {k: t.data.copy() for k, t in model.params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for k, arr in best[2].items():
        model.params[k].data = arr
    model.eval()
    return TrainResult(model, rows, best[1], best[0])


def bucketed_batches(convs, batch_size, rng, pool=8):
    """Shuffled batches of similar total length (less padding per batch)."""
    perm = rng.permutation(len(convs))
    sizes = np.array([sum(len(u.tokens) + 1 for u in c.utterances) for c in convs])
    batches = []
    chunk = batch_size * pool
    for s in range(0, len(perm), chunk):
        part = perm[s:s + chunk]
        part = part[np.argsort(sizes[part], kind="stable")]
        batches.extend(part[i:i + batch_size] for i in range(0, len(part), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _load_pair(cfg: TrainConfig):
    speakers = {}
    train_convs, vocab, labels = load_conversations(cfg.train, speakers=speakers)
    val_convs, _, _ = load_conversations(cfg.val, vocab, labels, speakers)
    if cfg.exclude_label is not None:
        labels[cfg.exclude_label]
        labels.excluded_label = cfg.exclude_label
    return train_convs, val_convs, vocab, labels, speakers


def train(cfg: TrainConfig, runs=1):
    """File-driven training: ``runs`` seeds starting at ``cfg.seed``.

    Writes the best run's checkpoint to ``cfg.out`` and the per-run logs to
    ``cfg.log`` (runs separated by a ``run`` column).  Returns the results.
    """
    train_convs, val_convs, vocab, labels, speakers = _load_pair(cfg)
    n_spk = max(len(speakers), 2)
    results = []
    for r in range(runs):
        run_cfg = replace(cfg, seed=cfg.seed + r)
        results.append(train_model(train_convs, val_convs, len(vocab), labels, cfg.model, run_cfg,
                                   n_speakers=n_spk))
    best = max(range(runs), key=lambda i: results[i].best_metric)
    if cfg.out:
        save_checkpoint(cfg.out, results[best].model, vocab, labels, speakers,
                        extra={"seed": cfg.seed + best, "best_epoch": results[best].best_epoch})
    if cfg.log:
        Path(cfg.log).write_text(runs_log_csv(results, cfg.seed))
    return results


def runs_log_csv(results, first_seed=0):
    parts = []
    for r, res in enumerate(results):
        body = res.log_csv().splitlines()
        if r == 0:
            parts.append("seed," + body[0])
        parts.extend(f"{first_seed + r},{line}" for line in body[1:])
    return "\n".join(parts) + "\n"


def evaluate(checkpoint, data_path, metric="weighted_f1", exclude_label=None):
    model, vocab, labels, speakers = load_checkpoint(checkpoint)
    convs, _, _ = load_conversations(data_path, vocab, labels, dict(speakers))
    if exclude_label is not None:
        labels[exclude_label]
    rep = evaluate_model(model, convs, labels, exclude_label or labels.excluded_label)
    return rep


# -- memory waste ----------------------------------------------------------

def length_profile(seed, n_conversations, mean_max_ratio=0.35, max_tokens=40, turns=(10, 40)):
    """Utterance token lengths whose dataset mean is ``mean_max_ratio`` times the maximum.

    Lengths are mostly short with an occasional long turn; the longest turn
    is pinned to ``max_tokens`` and the short-length scale is solved so the
    overall mean hits the ratio.
    """
    rng = np.random.default_rng(seed)
    counts = rng.integers(turns[0], turns[1] + 1, size=n_conversations)
    raw = [rng.exponential(1.0, size=int(c)) for c in counts]
    flat = np.concatenate(raw)
    target = mean_max_ratio * max_tokens
    # bisection on the exponential scale so that mean(clip(round(s*x), 1, max)) == target
    lo, hi = 0.01, 10 * max_tokens
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        m = np.clip(np.round(mid * flat), 1, max_tokens).mean()
        lo, hi = (mid, hi) if m < target else (lo, mid)
    scale = 0.5 * (lo + hi)
    out = [np.clip(np.round(scale * r), 1, max_tokens).astype(int).tolist() for r in raw]
    # pin the maximum
    i = int(np.argmax([max(x) for x in out]))
    j = int(np.argmax(out[i]))
    out[i][j] = max_tokens
    return out


def _lengths(dataset):
    out = []
    for conv in dataset:
        if isinstance(conv, Conversation):
            out.append([len(u.tokens) for u in conv.utterances])
        else:
            out.append([int(n) for n in conv])
    return out


def segment_waste(lengths, max_len=math.inf, batch=4):
    """Waste of padded segment recurrence over a dataset.

    Conversations are batched in order, ``batch`` rows at a time.  The batch
    has one fixed segment length, its longest utterance, and every step
    appends one such segment per live row (a finished conversation stops
    growing its memory).  The rate is pooled over the final memory of every
    row.  Returns ``(waste, mean real tokens in memory at query time)``.
    """
    pads = slots = 0
    ctx_total = ctx_count = 0
    for b in range(0, len(lengths), batch):
        rows = lengths[b:b + batch]
        mems = [SegmentMemory(1, 1, max_len) for _ in rows]
        width = max(max(r) for r in rows)
        for t in range(max(len(r) for r in rows)):
            for mem, r in zip(mems, rows):
                if t >= len(r):
                    continue
                ctx_total += len(mem) - mem.pad_count()
                ctx_count += 1
                mem.segment_update(0, np.zeros((width, 1)), np.arange(width) >= r[t])
        for mem in mems:
            pads += mem.pad_count()
            slots += len(mem)
    return (pads / slots if slots else 0.0), (ctx_total / ctx_count if ctx_count else 0.0)


def utterance_waste(lengths, max_len=math.inf):
    """Same accounting for utterance recurrence, run through real memory banks."""
    pads = slots = 0
    ctx_total = ctx_count = 0
    for r in lengths:
        bank = MemoryBank(1, 1, max_len)
        for t, n in enumerate(r):
            ctx_total += len(bank)
            ctx_count += 1
            bank.update(0, np.zeros((n + 1, 1)), t, 0)
            bank.truncate()
        slots += len(bank)
        # the bank has no padding slots by construction; count any that slipped in
        pads += sum(1 for utt, _ in bank.meta if utt < 0)
    return (pads / slots if slots else 0.0), (ctx_total / ctx_count if ctx_count else 0.0)


def analyze_memory(dataset, sweep=range(100, 1001, 100), batch=4):
    """Rows of ``max_len, utterance_waste, segment_waste, utterance_context, segment_context``."""
    lengths = _lengths(dataset)
    rows = []
    for max_len in sweep:
        uw, uc = utterance_waste(lengths, max_len)
        sw, sc = segment_waste(lengths, max_len, batch)
        rows.append({"max_len": max_len, "utterance_waste": uw, "segment_waste": sw,
                     "utterance_context": uc, "segment_context": sc})
    return rows


def rows_to_csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# -- ablation --------------------------------------------------------------

def parse_removals(spec):
    """``"speaker,listener,speaker&listener"`` -> [("speaker",), ("listener",), ("speaker", "listener")]."""
    arms = []
    for part in (spec.split(",") if isinstance(spec, str) else spec):
        names = tuple(p.strip() for p in (part.replace("+", "&").split("&") if isinstance(part, str) else part))
        for n in names:
            if n not in HEAD_TYPES:
                raise ValueError(f"unknown attention type {n!r}")
        arms.append(names)
    return arms


def ablate(train_convs, val_convs, n_vocab, labels, model_cfg: dict, cfg: TrainConfig, removals,
           seeds=(0,), n_speakers=None):
    """Train the full model and each ablated variant on identical seeds and data.

    Removed heads are reassigned to global attention so the head count stays
    fixed.  Returns one row per arm (control first) with the mean validation
    metric / accuracy over ``seeds`` and the drop relative to control.
    """
    if not len(seeds):
        raise ValueError("ablation needs at least one seed")
    base = HeadAllocation.parse(model_cfg.get("alloc", (2, 2, 4, 4)))
    arms = [()] + [tuple(r) for r in removals]
    rows = []
    for arm in arms:
        alloc = base.without(arm) if arm else base
        metrics, accs = [], []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            res = train_model(train_convs, val_convs, n_vocab, labels,
                              {**model_cfg, "alloc": alloc.counts}, run_cfg, n_speakers=n_speakers)
            metrics.append(res.best_metric)
            rep = evaluate_model(res.model, val_convs, labels)
            accs.append(rep.accuracy)
        rows.append({"removed": "&".join(arm) if arm else "none",
                     "alloc": "/".join(map(str, alloc.counts)),
                     "metric": float(np.mean(metrics)), "accuracy": float(np.mean(accs)),
                     "per_seed_accuracy": " ".join(f"{a:.4f}" for a in accs)})
    for r in rows:
        r["delta_metric"] = rows[0]["metric"] - r["metric"]
        r["delta_accuracy"] = rows[0]["accuracy"] - r["accuracy"]
    return rows


# -- mask dumps ------------------------------------------------------------

def conversation_masks(conv: Conversation, t, window=math.inf, max_len=math.inf):
    """The four masks for utterance ``t`` (0-based), built from a bank replaying the history.

    Returns ``(masks, memory_meta)``.
    """
    if not 0 <= t < len(conv):
        raise IndexError(f"utterance index {t} out of range for {len(conv)} utterances")
    bank = MemoryBank(1, 1, max_len)
    for i, u in enumerate(conv.utterances[:t]):
        bank.update(0, np.zeros((len(u.tokens) + 1, 1)), i, u.speaker_id)
        bank.truncate()
    meta = bank.meta
    u = conv.utterances[t]
    return build_masks(len(u.tokens), meta, t, u.speaker_id, window), meta


def dump_masks(conv: Conversation, t, out_path=None, window=math.inf, max_len=math.inf,
               vocab: Vocabulary | None = None):
    """Write the four masks for 1-based utterance ``t`` as JSON; returns the dumped object."""
    if not 1 <= t <= len(conv):
        raise IndexError(f"t={t} outside 1..{len(conv)}")
    masks, meta = conversation_masks(conv, t - 1, window, max_len)
    u = conv.utterances[t - 1]

    def tok(i):
        return vocab.itos[i] if vocab is not None else int(i)

    columns = []
    offsets = {}
    for utt, spk in meta:
        k = offsets.get(utt, 0)
        offsets[utt] = k + 1
        src = conv.utterances[utt]
        # truncated blocks keep their trailing tokens
        skip = len(src.tokens) - sum(1 for m in meta if m[0] == utt)
        columns.append({"utterance_index": utt, "speaker_id": spk, "memory": True,
                        "token": tok(src.tokens[skip + k])})
    cur = [CLS, *u.tokens]
    columns += [{"utterance_index": t - 1, "speaker_id": u.speaker_id, "memory": False,
                 "token": tok(x)} for x in cur]
    rows = [{"utterance_index": t - 1, "speaker_id": u.speaker_id, "token": tok(x)} for x in cur]
    obj = {
        "conversation_id": conv.conversation_id, "t": t,
        "window": None if math.isinf(window) else window,
        "max_len": None if math.isinf(max_len) else max_len,
        "rows": rows, "columns": columns,
        "masks": {c: m.astype(int).tolist() for c, m in masks.items()},
    }
    if out_path is not None:
        Path(out_path).write_text(json.dumps(obj, indent=1))
    return obj


def load_mask_dump(path):
    obj = json.loads(Path(path).read_text())
    obj["masks"] = {c: np.asarray(m, dtype=bool) for c, m in obj["masks"].items()}
    return obj
