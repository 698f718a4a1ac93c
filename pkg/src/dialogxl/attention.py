"""Dialog-aware masks, relative-position attention, and the dialog-aware layer.

Masks are boolean with ``True`` meaning *masked*.  Query rows are ``[CLS]``
plus the tokens of the query utterance; key columns are the cached memory
positions followed by the query utterance's own ``1 + n_t`` positions.  The
query utterance's own columns are always visible, for every head type.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx

HEAD_TYPES = ("global", "local", "speaker", "listener")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class HeadAllocation:
    global_: int = 2
    local: int = 2
    speaker: int = 4
    listener: int = 4

    def __post_init__(self):
        if min(self.counts) < 0:
            raise ConfigurationError(f"negative head count in {self.counts}")
        if self.total == 0:
            raise ConfigurationError("head allocation has no heads")

    @property
    def counts(self):
        return (self.global_, self.local, self.speaker, self.listener)

    @property
    def total(self):
        return sum(self.counts)

    def head_types(self):
        """Type of each head, in concatenation order."""
        return [t for t, k in zip(HEAD_TYPES, self.counts) for _ in range(k)]

    @classmethod
    def parse(cls, spec):
        if isinstance(spec, HeadAllocation):
            return spec
        if isinstance(spec, str):
            spec = [int(s) for s in spec.replace("/", ",").split(",")]
        if isinstance(spec, dict):
            return cls(spec.get("global", 0), spec.get("local", 0), spec.get("speaker", 0),
                       spec.get("listener", 0))
        return cls(*spec)

    def without(self, removed):
        """Move the heads of each removed type to global attention."""
        counts = dict(zip(HEAD_TYPES, self.counts))
        removed = set(removed)
        if removed >= set(HEAD_TYPES):
            raise ConfigurationError("cannot remove all four attention types")
        freed = sum(counts[r] for r in removed)
        for r in removed:
            counts[r] = 0
        if "global" in removed:
            # global itself removed: hand its heads to the first surviving type
            target = next(t for t in HEAD_TYPES if t not in removed)
        else:
            target = "global"
        counts[target] += freed
        return HeadAllocation(counts["global"], counts["local"], counts["speaker"], counts["listener"])


# -- mask builders ---------------------------------------------------------

def _mem_arrays(mem_meta):
    if len(mem_meta) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    arr = np.asarray(mem_meta, dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def _assemble(n_t, mem_masked):
    row = np.concatenate([mem_masked, np.zeros(1 + n_t, dtype=bool)])
    return np.broadcast_to(row, (1 + n_t, row.size)).copy()


def build_global_mask(n_t, mem_meta):
    return _assemble(n_t, np.zeros(len(mem_meta), dtype=bool))


def build_local_mask(n_t, mem_meta, window, t):
    """Mask memory from utterances older than the ``window`` most recent ones."""
    if window < 0:
        raise ValueError("local window must be >= 0")
    utt, _ = _mem_arrays(mem_meta)
    return _assemble(n_t, utt < t - window)


def build_speaker_mask(n_t, mem_meta, speaker_t):
    _, spk = _mem_arrays(mem_meta)
    return _assemble(n_t, spk != speaker_t)


def build_listener_mask(n_t, mem_meta, speaker_t):
    _, spk = _mem_arrays(mem_meta)
    return _assemble(n_t, spk == speaker_t)


def build_masks(n_t, mem_meta, t, speaker_t, window=math.inf):
    return {
        "global": build_global_mask(n_t, mem_meta),
        "local": build_local_mask(n_t, mem_meta, window, t),
        "speaker": build_speaker_mask(n_t, mem_meta, speaker_t),
        "listener": build_listener_mask(n_t, mem_meta, speaker_t),
    }


def mask_oracle(prefix, t, window=math.inf, max_len=math.inf):
    """Reference masks evaluated pair by pair from utterance metadata.

    ``prefix`` lists ``(n_tokens, speaker)`` for utterances ``0..t``; the
    cached keys are the last ``max_len`` utterance tokens before ``u_t``.
    """
    keys = []  # (utterance, is_current)
    for i in range(t):
        keys.extend((i, False) for _ in range(prefix[i][0]))
    if len(keys) > max_len:
        keys = keys[len(keys) - int(max_len):]
    n_t, spk_t = prefix[t]
    keys.extend((t, True) for _ in range(1 + n_t))
    masks = {c: np.zeros((1 + n_t, len(keys)), dtype=bool) for c in HEAD_TYPES}
    for q in range(1 + n_t):
        for j, (u, current) in enumerate(keys):
            spk_u = prefix[u][1]
            in_window = t - window <= u <= t
            masks["local"][q, j] = not in_window
            masks["speaker"][q, j] = spk_u != spk_t
            masks["listener"][q, j] = spk_u == spk_t and not current
    return masks


# -- relative positions ----------------------------------------------------

def sinusoid_table(n_dist, d, dtype=np.float64):
    """Row ``k`` encodes distance ``k`` as concatenated [sin | cos] features."""
    half = d // 2
    inv = 1.0 / (10000 ** (np.arange(half, dtype=np.float64) * 2.0 / d))
    pos = np.arange(n_dist, dtype=np.float64)[:, None] * inv[None, :]
    table = np.zeros((n_dist, d))
    table[:, :half] = np.sin(pos)
    table[:, half:2 * half] = np.cos(pos)
    return table.astype(dtype)


def rel_pos_attention(q, k, v, mask, r, dist, u, v_bias, scale=None,
                      k_det=None, v_det=None, same_block=None, dropout=0.0, rng=None, training=False):
    """Transformer-XL style scoring over ``[memory | current]`` keys.

    score(i, j) = (q_i + u) . k_j + (q_i + v_bias) . r[dist(i, j)], scaled by
    ``1/sqrt(d_head)``, masked additively, then softmax-normalised.

    Shapes share arbitrary leading axes: ``q`` (..., Tq, dh); ``k, v`` (..., Tk, dh);
    ``r`` (..., D, dh) projected relative encodings; ``u, v_bias`` (..., 1, dh);
    ``dist`` integer (..., Tq, Tk); ``mask`` boolean, broadcastable to the scores.

    When ``k_det``/``v_det`` are given, ``same_block`` selects the attached
    ``k``/``v`` for in-utterance pairs and the detached copies elsewhere, so
    history contributes values without carrying gradient.

    Returns ``(output, weights)``.
    """
    dh = q.shape[-1]
    scale = 1.0 / math.sqrt(dh) if scale is None else scale
    qu = nx.add(q, u)
    content = nx.matmul(qu, nx.swapaxes(k, -1, -2))
    if k_det is not None:
        content = nx.where(same_block, content, nx.matmul(qu, nx.swapaxes(k_det, -1, -2)))
    pos_all = nx.matmul(nx.add(q, v_bias), nx.swapaxes(r, -1, -2))
    pos = nx.gather_last(pos_all, np.clip(dist, 0, r.shape[-2] - 1))
    scores = nx.mul(nx.add(content, pos), scale)
    scores = nx.add(scores, np.where(mask, nx.LARGE_NEG, 0.0).astype(scores.dtype))
    weights = nx.softmax_rows(scores)
    w = nx.dropout(weights, dropout, rng, training)
    if v_det is None:
        out = nx.matmul(w, v)
    else:
        inside = np.asarray(same_block, dtype=w.dtype)
        out = nx.add(nx.matmul(nx.mul(w, inside), v), nx.matmul(nx.mul(w, 1.0 - inside), v_det))
    return out, weights


# -- layer -----------------------------------------------------------------

def _heads(x, n_heads):
    """(..., T, K*dh) -> (..., K, T, dh)"""
    *lead, t, d = x.shape
    x = nx.reshape(x, (*lead, t, n_heads, d // n_heads))
    return nx.swapaxes(x, -2, -3)


def _merge(x):
    """(..., K, T, dh) -> (..., T, K*dh)"""
    x = nx.swapaxes(x, -2, -3)
    *lead, t, k, dh = x.shape
    return nx.reshape(x, (*lead, t, k * dh))


def dialog_aware_layer(h, params, visible, dist, alloc: HeadAllocation, rel_table,
                       memory=None, same_block=None, residual=True, dropout=0.0, rng=None,
                       training=False, return_weights=False):
    """One dialog-aware Transformer layer.

    ``h`` (..., Tq, d) holds the current positions.  History comes either as
    ``memory`` (..., M, d), a constant prepended to the keys, or through
    ``same_block``, in which case ``h`` itself spans the whole conversation and
    out-of-block keys are read through a detached copy.

    ``visible`` is a dict head-type -> boolean (..., Tq, Tk) with ``True`` = visible.
    """
    d = h.shape[-1]
    n_heads = alloc.total
    if params["wq"].shape[1] != d or d % n_heads:
        raise ConfigurationError(f"hidden size {d} incompatible with {n_heads} heads / parameter shapes")
    if len(alloc.head_types()) != params["u"].shape[0]:
        raise ConfigurationError("head allocation does not match the layer's head count")
    if memory is not None and memory.shape[-2] > 0:
        kv = nx.concat([memory, h], axis=-2)
    else:
        kv = h
    q = _heads(nx.matmul(h, params["wq"]), n_heads)
    k = _heads(nx.matmul(kv, params["wk"]), n_heads)
    v = _heads(nx.matmul(kv, params["wv"]), n_heads)
    k_det = v_det = None
    sel = None
    if same_block is not None:
        kv_det = nx.detach(kv)
        k_det = _heads(nx.matmul(kv_det, params["wk"]), n_heads)
        v_det = _heads(nx.matmul(kv_det, params["wv"]), n_heads)
        sel = np.expand_dims(same_block, -3)
    n_dist = int(dist.max()) + 1 if dist.size else 1
    r = nx.matmul(nx.Tensor(rel_table[:n_dist]), params["wr"])     # (D, d)
    r = nx.swapaxes(nx.reshape(r, (n_dist, n_heads, d // n_heads)), 0, 1)  # (K, D, dh)
    types = alloc.head_types()
    vis = np.stack([visible[c] for c in types], axis=-3)  # (..., K, Tq, Tk)
    u = nx.reshape(params["u"], (n_heads, 1, d // n_heads))
    vb = nx.reshape(params["v_bias"], (n_heads, 1, d // n_heads))
    o, weights = rel_pos_attention(q, k, v, ~vis, r, np.expand_dims(dist, -3), u, vb,
                                   k_det=k_det, v_det=v_det, same_block=sel,
                                   dropout=dropout, rng=rng, training=training)
    o = _merge(o)
    if residual:
        a = nx.add(h, nx.dropout(o, dropout, rng, training))
        ff = feed_forward(nx.layer_norm(a, params["ln_g"], params["ln_b"]), params)
        out = nx.add(a, nx.dropout(ff, dropout, rng, training))
    else:
        out = feed_forward(nx.layer_norm(o, params["ln_g"], params["ln_b"]), params)
    if return_weights:
        return out, weights
    return out


def feed_forward(x, params):
    hidden = nx.gelu(nx.add(nx.matmul(x, params["ff1_w"]), params["ff1_b"]))
    return nx.add(nx.matmul(hidden, params["ff2_w"]), params["ff2_b"])


def layer_param_shapes(d, n_heads):
    dh = d // n_heads
    return {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wr": (d, d),
        "u": (n_heads, dh), "v_bias": (n_heads, dh),
        "ln_g": (d,), "ln_b": (d,),
        "ff1_w": (d, 4 * d), "ff1_b": (4 * d,),
        "ff2_w": (4 * d, d), "ff2_b": (d,),
    }
