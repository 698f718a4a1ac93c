"""Train on the synthetic rule mix with and without the speaker/listener heads.

The labels depend on the current utterance (LOCAL), the speaker's own previous
turn (INTRA) or the latest turn by someone else (INTER), so the last two need to
know who spoke.  Defaults are small enough for a couple of minutes on one core.
"""
import argparse

from dialogxl.attention import HeadAllocation
from dialogxl.data import synth_generate
from dialogxl.training import TrainConfig, evaluate_model, train_model

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--train", type=int, default=400)
ap.add_argument("--val", type=int, default=100)
ap.add_argument("--epochs", type=int, default=8)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

mix = (0.2, 0.4, 0.4)
tr, vocab, labels = synth_generate(args.seed, args.train, task_mix=mix)
va, _, _ = synth_generate(args.seed + 1, args.val, task_mix=mix, id_prefix="val")
base = dict(d=16, n_layers=2, alloc=(1, 1, 1, 1), window=2, dropout=0.0)
arms = {
    "dialog attention": base,
    "no speaker/listener": {**base, "alloc": HeadAllocation(1, 1, 1, 1).without(("speaker", "listener")).counts},
    "role embedding": {**base, "mode": "speaker_embedding"},
}
cfg = TrainConfig(epochs=args.epochs, lr=3e-3, metric="accuracy", patience=args.epochs, seed=args.seed)
for name, model_cfg in arms.items():
    res = train_model(tr, va, len(vocab), labels, model_cfg, cfg)
    rep = evaluate_model(res.model, va, labels)
    by_rule = "  ".join(f"{k} {v:.2f}" for k, v in sorted(rep.rule_accuracy.items()))
    print(f"{name:<20} acc {rep.accuracy:.3f}  {by_rule}")
