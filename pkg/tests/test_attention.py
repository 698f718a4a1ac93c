import math

import numpy as np
import pytest

from dialogxl import numerics as nx
from dialogxl.attention import (
    HEAD_TYPES, ConfigurationError, HeadAllocation, build_global_mask, build_listener_mask,
    build_local_mask, build_masks, build_speaker_mask, dialog_aware_layer, layer_param_shapes,
    mask_oracle, rel_pos_attention, sinusoid_table,
)
from dialogxl.memory import MemoryBank

# four-turn layout: u_t is utterance 3; p(u_t) = p(u_{t-2}), p(u_{t-1}) = p(u_{t-3})
FOUR_TURN_PREFIX = [(2, 1), (3, 0), (2, 1), (2, 0)]
FOUR_TURN_T = 3


def meta_for(prefix, t, max_len=math.inf):
    bank = MemoryBank(1, 1, max_len)
    for i in range(t):
        bank.update(0, np.zeros((prefix[i][0] + 1, 1)), i, prefix[i][1])
        bank.truncate()
    return bank.meta


def column_utterances(prefix, t):
    return [i for i in range(t) for _ in range(prefix[i][0])] + [t] * (1 + prefix[t][0])


def visible_utts(mask, cols):
    return sorted({u for u, m in zip(cols, mask[0]) if not m})


def test_four_turn_masks():
    meta = meta_for(FOUR_TURN_PREFIX, FOUR_TURN_T)
    n_t, spk = FOUR_TURN_PREFIX[FOUR_TURN_T]
    cols = column_utterances(FOUR_TURN_PREFIX, FOUR_TURN_T)
    masks = build_masks(n_t, meta, FOUR_TURN_T, spk, window=2)
    assert visible_utts(masks["global"], cols) == [0, 1, 2, 3]
    assert visible_utts(masks["local"], cols) == [1, 2, 3]
    assert visible_utts(masks["speaker"], cols) == [1, 3]
    assert visible_utts(masks["listener"], cols) == [0, 2, 3]
    for c in HEAD_TYPES:
        # every query row, [CLS] included, shares the same mask
        assert (masks[c] == masks[c][0]).all()
        assert masks[c].shape == (1 + n_t, len(cols))
    oracle = mask_oracle(FOUR_TURN_PREFIX, FOUR_TURN_T, window=2)
    for c in HEAD_TYPES:
        np.testing.assert_array_equal(masks[c], oracle[c])


def test_mask_boundaries():
    meta = meta_for(FOUR_TURN_PREFIX, FOUR_TURN_T)
    n_mem = len(meta)
    assert not build_global_mask(2, meta).any()
    loc0 = build_local_mask(2, meta, 0, FOUR_TURN_T)
    assert loc0[:, :n_mem].all() and not loc0[:, n_mem:].any()
    np.testing.assert_array_equal(build_local_mask(2, meta, FOUR_TURN_T, FOUR_TURN_T), build_global_mask(2, meta))
    single = [(u, 0) for u, _ in meta]
    np.testing.assert_array_equal(build_speaker_mask(2, single, 0), build_global_mask(2, single))
    # no same-speaker / other-speaker history: only the current columns stay visible
    sp = build_speaker_mask(2, single, 5)
    assert sp[:, :n_mem].all() and not sp[:, n_mem:].any()
    ls = build_listener_mask(2, single, 0)
    assert ls[:, :n_mem].all() and not ls[:, n_mem:].any()
    with pytest.raises(ValueError):
        build_local_mask(2, meta, -1, FOUR_TURN_T)


def test_builders_match_oracle_and_set_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n_utt = int(rng.integers(1, 12))
        n_spk = int(rng.integers(1, 5))
        prefix = [(int(rng.integers(1, 6)), int(rng.integers(n_spk))) for _ in range(n_utt)]
        t = int(rng.integers(n_utt))
        window = [0, 1, 2, 5, math.inf][int(rng.integers(5))]
        max_len = [math.inf, 7, 20][int(rng.integers(3))]
        meta = meta_for(prefix, t, max_len)
        masks = build_masks(prefix[t][0], meta, t, prefix[t][1], window)
        oracle = mask_oracle(prefix, t, window, max_len)
        n_mem = len(meta)
        for c in HEAD_TYPES:
            np.testing.assert_array_equal(masks[c], oracle[c])
            assert (~masks[c]).any(axis=1).all()
            assert not (masks["global"] & ~masks[c]).any() or c == "global"
        sp, ls = ~masks["speaker"][0, :n_mem], ~masks["listener"][0, :n_mem]
        assert not (sp & ls).any() and (sp | ls).all()


def test_head_allocation():
    a = HeadAllocation()
    assert a.counts == (2, 2, 4, 4) and a.total == 12
    assert a.head_types()[:3] == ["global", "global", "local"]
    assert HeadAllocation.parse("1,1,1,1").counts == (1, 1, 1, 1)
    assert a.without(["speaker", "listener"]).counts == (10, 2, 0, 0)
    assert a.without(["global"]).counts == (0, 4, 4, 4)
    with pytest.raises(ConfigurationError):
        a.without(HEAD_TYPES)
    with pytest.raises(ConfigurationError):
        HeadAllocation(0, 0, 0, 0)


def test_sinusoid_table():
    t = sinusoid_table(5, 6)
    np.testing.assert_allclose(t[0], [0, 0, 0, 1, 1, 1])
    np.testing.assert_allclose(t[3, 0], math.sin(3.0))
    np.testing.assert_allclose(t[3, 4], math.cos(3.0 / 10000 ** (2 / 6)))
    np.testing.assert_array_equal(sinusoid_table(5, 6), t)


def _zeros(*shape):
    return nx.Tensor(np.zeros(shape))


def test_single_key_attention_returns_value_row():
    v = nx.Tensor([[3.0, -1.0]])
    out, w = rel_pos_attention(_zeros(1, 2), _zeros(1, 2), v, np.zeros((1, 1), bool), _zeros(1, 2),
                               np.zeros((1, 1), int), _zeros(1, 2), _zeros(1, 2))
    assert w.data[0, 0] == 1.0
    np.testing.assert_array_equal(out.data, v.data)


def test_rel_attention_against_plain_evaluation():
    rng = np.random.default_rng(3)
    q, k, v = rng.normal(size=(1, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    r = rng.normal(size=(4, 2))
    u, vb = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    dist = np.array([[3, 1, 0]])
    mask = np.array([[False, True, False]])
    out, w = rel_pos_attention(*(nx.Tensor(x) for x in (q, k, v)), mask, nx.Tensor(r), dist,
                               nx.Tensor(u), nx.Tensor(vb))
    scores = []
    for j in range(3):
        s = (q[0] @ k[j] + q[0] @ r[dist[0, j]] + u[0] @ k[j] + vb[0] @ r[dist[0, j]]) / math.sqrt(2)
        scores.append(-np.inf if mask[0, j] else s)
    e = np.exp(np.array(scores) - max(scores))
    ref = e / e.sum()
    np.testing.assert_allclose(w.data[0], ref, atol=1e-10)
    assert w.data[0, 1] < 1e-12
    np.testing.assert_allclose(out.data[0], ref @ v, atol=1e-10)


def layer_params(d, alloc, rng):
    return {name: nx.Tensor(rng.normal(scale=0.3, size=shape))
            for name, shape in layer_param_shapes(d, alloc.total).items()}


def test_layer_shape_and_allocation_invariance_without_memory():
    rng = np.random.default_rng(4)
    d, n = 8, 5
    h = nx.Tensor(rng.normal(size=(1 + n, d)))
    table = sinusoid_table(16, d)
    dist = np.clip(np.arange(1 + n)[:, None] - np.arange(1 + n)[None, :], 0, None)
    vis = {c: np.ones((1 + n, 1 + n), bool) for c in HEAD_TYPES}
    base = HeadAllocation(4, 0, 0, 0)
    params = layer_params(d, base, rng)
    out = dialog_aware_layer(h, params, vis, dist, base, table)
    assert out.shape == h.shape
    for alloc in [HeadAllocation(1, 1, 1, 1), HeadAllocation(0, 0, 2, 2), HeadAllocation(2, 2, 0, 0)]:
        np.testing.assert_allclose(dialog_aware_layer(h, params, vis, dist, alloc, table).data, out.data,
                                   atol=1e-12)


def test_layer_rejects_bad_configuration():
    rng = np.random.default_rng(5)
    alloc = HeadAllocation(1, 1, 1, 1)
    params = layer_params(8, alloc, rng)
    h = nx.Tensor(rng.normal(size=(3, 8)))
    vis = {c: np.ones((3, 3), bool) for c in HEAD_TYPES}
    dist = np.zeros((3, 3), int)
    with pytest.raises(ConfigurationError):
        dialog_aware_layer(h, params, vis, dist, HeadAllocation(1, 1, 1, 0), sinusoid_table(4, 8))
    with pytest.raises(ConfigurationError):
        dialog_aware_layer(nx.Tensor(rng.normal(size=(3, 6))), params, vis, dist, alloc, sinusoid_table(4, 6))
