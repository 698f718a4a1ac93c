"""Utterance-recurrence memory, the padded segment-recurrence baseline, and waste accounting."""
from __future__ import annotations

import hashlib
import json
import math

import numpy as np


class MemoryConsistencyError(RuntimeError):
    pass


class MemoryBank:
    """Per-layer cache of utterance-token hidden states.

    Only utterance tokens are stored: the ``[CLS]`` row of every update is
    dropped and no padding ever enters.  Each cached row carries the
    ``(utterance_index, speaker_id)`` it came from.  Cached values are plain
    arrays, so gradients never flow into history.
    """

    def __init__(self, n_layers, d, max_len=math.inf, whole_utterances=False, dtype=np.float64):
        if n_layers < 1:
            raise ValueError("a memory bank needs at least one layer")
        self.n_layers = n_layers
        self.d = d
        self.max_len = max_len
        self.whole_utterances = whole_utterances
        self.dtype = dtype
        self.hidden = [np.zeros((0, d), dtype=dtype) for _ in range(n_layers)]
        self._meta = [[] for _ in range(n_layers)]
        self.processed = 0  # utterances seen so far in this conversation

    def __len__(self):
        self._check()
        return len(self._meta[0])

    @property
    def meta(self):
        self._check()
        return list(self._meta[0])

    def layer_meta(self, layer):
        return list(self._meta[layer])

    def _check(self):
        lens = {len(m) for m in self._meta} | {h.shape[0] for h in self.hidden}
        if len(lens) != 1:
            raise MemoryConsistencyError(f"memory layers out of sync: lengths {sorted(lens)}")

    def update(self, layer, h_t, utterance_index, speaker_id):
        """Append rows ``1:`` of ``h_t`` (row 0 is ``[CLS]``) to ``layer``."""
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.n_layers})")
        rows = np.asarray(getattr(h_t, "data", h_t))[1:]
        if rows.ndim != 2 or rows.shape[1] != self.d:
            raise ValueError(f"expected hidden rows of width {self.d}, got shape {rows.shape}")
        meta = self._meta[layer]
        if meta and utterance_index < meta[-1][0]:
            raise MemoryConsistencyError(
                f"utterance {utterance_index} arrives after utterance {meta[-1][0]}")
        self.hidden[layer] = np.concatenate([self.hidden[layer], rows.astype(self.dtype, copy=True)])
        meta.extend([(utterance_index, speaker_id)] * rows.shape[0])
        if len(meta) != self.hidden[layer].shape[0]:
            raise MemoryConsistencyError("meta and hidden lengths diverged")

    def truncate(self):
        """Drop the oldest positions until the bank fits ``max_len``; returns how many were dropped."""
        self._check()
        n = len(self._meta[0])
        if n <= self.max_len:
            return 0
        drop = int(n - self.max_len)
        if self.whole_utterances:
            meta = self._meta[0]
            # extend to the end of the utterance block containing the last dropped row
            boundary = meta[drop - 1][0]
            while drop < n and meta[drop][0] == boundary:
                drop += 1
        for layer in range(self.n_layers):
            self.hidden[layer] = self.hidden[layer][drop:]
            del self._meta[layer][:drop]
        return drop

    def reset(self):
        for layer in range(self.n_layers):
            self.hidden[layer] = np.zeros((0, self.d), dtype=self.dtype)
            self._meta[layer].clear()
        self.processed = 0

    def snapshot(self, checksums=False):
        """JSON-ready debug view: per-layer length and run-length encoded meta blocks."""
        blocks = []
        for utt, spk in self.meta:
            if blocks and blocks[-1]["utterance_index"] == utt:
                blocks[-1]["length"] += 1
            else:
                blocks.append({"utterance_index": utt, "speaker_id": spk, "length": 1})
        snap = {
            "max_len": None if math.isinf(self.max_len) else int(self.max_len),
            "layers": [{"layer": i, "length": int(h.shape[0])} for i, h in enumerate(self.hidden)],
            "blocks": blocks,
        }
        if checksums:
            for entry, h in zip(snap["layers"], self.hidden):
                entry["sha256"] = hashlib.sha256(np.ascontiguousarray(h).tobytes()).hexdigest()
        return snap

    def dump(self, path, checksums=True):
        with open(path, "w") as fh:
            json.dump(self.snapshot(checksums), fh, indent=1)


def retained_windows(lengths, max_len=math.inf, whole_utterances=False):
    """For each utterance, the half-open range of global token indices cached when it is queried.

    Tokens are numbered across the conversation, ``[CLS]`` excluded.  This is
    the metadata-only trace of a :class:`MemoryBank` fed the same lengths.
    """
    windows = []
    lo = 0
    start = 0
    owner = []
    for n in lengths:
        windows.append((lo, start))
        start += n
        owner.extend([len(windows) - 1] * n)
        if start - lo > max_len:
            drop = int(start - lo - max_len)
            new_lo = lo + drop
            if whole_utterances:
                boundary = owner[new_lo - 1]
                while new_lo < start and owner[new_lo] == boundary:
                    new_lo += 1
            lo = new_lo
    return windows


class SegmentMemory:
    """Segment-recurrence baseline: caches full padded rows, padding included."""

    def __init__(self, n_layers, d, max_len=math.inf, dtype=np.float64):
        self.n_layers = n_layers
        self.d = d
        self.max_len = max_len
        self.hidden = [np.zeros((0, d), dtype=dtype) for _ in range(n_layers)]
        self.pad_mask = [np.zeros(0, dtype=bool) for _ in range(n_layers)]

    def __len__(self):
        return self.hidden[0].shape[0]

    def segment_update(self, layer, h_batch, pad_mask):
        h = np.asarray(getattr(h_batch, "data", h_batch))
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if h.shape[0] != pad_mask.shape[0]:
            raise ValueError("pad mask length does not match the segment width")
        self.hidden[layer] = np.concatenate([self.hidden[layer], h])
        self.pad_mask[layer] = np.concatenate([self.pad_mask[layer], pad_mask])
        excess = self.hidden[layer].shape[0] - self.max_len
        if excess > 0:
            excess = int(excess)
            self.hidden[layer] = self.hidden[layer][excess:]
            self.pad_mask[layer] = self.pad_mask[layer][excess:]

    def pad_count(self, layer=0):
        return int(self.pad_mask[layer].sum())


def waste_rate(seg: SegmentMemory, layer=0):
    """Fraction of cached slots holding padding."""
    total = seg.pad_mask[layer].shape[0]
    if total == 0:
        raise ValueError("waste rate of an empty memory is undefined")
    return seg.pad_count(layer) / total
