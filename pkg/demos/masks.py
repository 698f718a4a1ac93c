"""Print the four dialog-aware masks for one query of a short four-party exchange.

Columns are memory tokens followed by the query's own [CLS] and tokens; a dot is
visible, an x is blocked.  Every query row shares one mask, so only row 0 is shown.
"""
import math

from dialogxl.attention import HEAD_TYPES, build_masks
from dialogxl.memory import MemoryBank

# (tokens, speaker) per utterance; the query is the last one
dialog = [(2, 1), (3, 0), (2, 1), (2, 0)]
t = len(dialog) - 1
window = 2

bank = MemoryBank(1, 1, math.inf)
for i, (n, spk) in enumerate(dialog[:t]):
    bank.update(0, [[0.0]] * (n + 1), i, spk)

n_t, spk_t = dialog[t]
masks = build_masks(n_t, bank.meta, t, spk_t, window)
owners = [u for u, _ in bank.meta] + [t] * (n_t + 1)

print("utterance  " + "".join(str(u) for u in owners))
print("speaker    " + "".join(str(s) for _, s in bank.meta) + str(spk_t) * (n_t + 1))
for name in HEAD_TYPES:
    print(f"{name:<10} " + "".join("x" if m else "." for m in masks[name][0]))
