"""Conversations, vocabulary, JSON ingestion, and the synthetic dialog generator."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLS, PAD, UNK = 0, 1, 2
RESERVED = {"[CLS]": CLS, "[PAD]": PAD, "[UNK]": UNK}

RULES = ("LOCAL", "INTRA", "INTER")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DataError(ValueError):
    """Malformed input data."""


@dataclass(frozen=True)
class Utterance:
    tokens: tuple
    speaker_id: int
    label: int | None = None
    raw_text: str = ""
    speaker: str | None = None
    rule: str | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise DataError("utterance has no tokens")
        if self.speaker_id < 0:
            raise DataError(f"negative speaker id {self.speaker_id}")


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    utterances: tuple
    speakers_given: bool = True

    def __post_init__(self):
        if not self.utterances:
            raise DataError(f"conversation {self.conversation_id!r} has no utterances")

    def __len__(self):
        return len(self.utterances)

    @property
    def speaker_ids(self):
        return [u.speaker_id for u in self.utterances]

    @property
    def labels(self):
        return [u.label for u in self.utterances]


class Vocabulary:
    """Token <-> id map with ``[CLS]``=0, ``[PAD]``=1, ``[UNK]``=2 reserved."""

    def __init__(self, tokens=()):
        self.stoi = dict(RESERVED)
        self.itos = list(RESERVED)
        for tok in tokens:
            self.add(tok)

    def add(self, tok):
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def __getitem__(self, tok):
        return self.stoi.get(tok, UNK)

    def to_json(self):
        return dict(self.stoi)

    @classmethod
    def from_json(cls, mapping):
        vocab = cls()
        for tok, idx in sorted(mapping.items(), key=lambda kv: kv[1]):
            if tok in RESERVED:
                if RESERVED[tok] != idx:
                    raise DataError(f"reserved token {tok} must have id {RESERVED[tok]}, got {idx}")
                continue
            if idx != len(vocab.itos):
                raise DataError(f"vocabulary ids must be contiguous; {tok!r} has id {idx}")
            vocab.add(tok)
        return vocab

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class LabelSet:
    def __init__(self, names=(), excluded_label=None):
        self.stoi = {}
        self.itos = []
        for n in names:
            self.add(n)
        self.excluded_label = excluded_label

    def add(self, name):
        if name not in self.stoi:
            self.stoi[name] = len(self.itos)
            self.itos.append(name)
        return self.stoi[name]

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, name):
        try:
            return self.stoi[name]
        except KeyError:
            raise DataError(f"unknown label {name!r}") from None

    @property
    def excluded_id(self):
        return None if self.excluded_label is None else self[self.excluded_label]

    def to_json(self):
        return dict(self.stoi)

    @classmethod
    def from_json(cls, mapping, excluded_label=None):
        items = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in items] != list(range(len(items))):
            raise DataError("label ids must be contiguous from 0")
        return cls([n for n, _ in items], excluded_label)

    @classmethod
    def load(cls, path, excluded_label=None):
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")), excluded_label)


def split_words(text):
    return _TOKEN_RE.findall(text.lower())


def tokenize(text, vocab: Vocabulary):
    return [vocab[w] for w in split_words(text)]


def encode_input(u: Utterance):
    """``[CLS]`` followed by the utterance's token ids."""
    if len(u.tokens) == 0:
        raise DataError("cannot encode an empty utterance")
    return [CLS, *u.tokens]


def build_vocab(records):
    vocab = Vocabulary()
    for rec in records:
        for utt in rec.get("utterances", ()):
            for w in split_words(utt.get("text", "")):
                vocab.add(w)
    return vocab


def _check_record(rec, ci):
    if not isinstance(rec, dict):
        raise DataError(f"conversation #{ci}: expected an object")
    for key in ("conversation_id", "utterances"):
        if key not in rec:
            raise DataError(f"conversation #{ci}: missing field {key!r}")
    if not isinstance(rec["utterances"], list) or not rec["utterances"]:
        raise DataError(f"conversation {rec['conversation_id']!r}: 'utterances' must be a non-empty list")


def parse_conversations(records, vocab: Vocabulary, labels: LabelSet, speakers: dict | None = None,
                        grow_labels=False):
    """Turn raw JSON records into :class:`Conversation` objects.

    ``speakers`` maps speaker names to integer ids and grows as new names
    appear.  A conversation with no speaker fields at all gets alternating
    ids 0/1; one with only some speaker fields is rejected.
    """
    speakers = {} if speakers is None else speakers
    out = []
    for ci, rec in enumerate(records):
        _check_record(rec, ci)
        cid = str(rec["conversation_id"])
        raw = rec["utterances"]
        has_spk = ["speaker" in u for u in raw if isinstance(u, dict)]
        given = all(has_spk) and len(has_spk) == len(raw)
        if not given and any(has_spk):
            missing = has_spk.index(False)
            raise DataError(f"conversation {cid!r}, utterance {missing}: missing field 'speaker'")
        utts = []
        for ui, u in enumerate(raw):
            if not isinstance(u, dict) or "text" not in u:
                raise DataError(f"conversation {cid!r}, utterance {ui}: missing field 'text'")
            toks = tokenize(u["text"], vocab)
            if not toks:
                raise DataError(f"conversation {cid!r}, utterance {ui}: empty utterance")
            if given:
                name = str(u["speaker"])
                sid = speakers.setdefault(name, len(speakers))
            else:
                name, sid = None, ui % 2
            lab = None
            if u.get("label") is not None:
                if grow_labels:
                    labels.add(u["label"])
                try:
                    lab = labels[u["label"]]
                except DataError:
                    raise DataError(f"conversation {cid!r}, utterance {ui}: unknown label {u['label']!r}") from None
            utts.append(Utterance(tuple(toks), sid, lab, u["text"], name, u.get("rule")))
        out.append(Conversation(cid, tuple(utts), given))
    return out


def read_json(path):
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(records, list):
        raise DataError(f"{path}: top level must be an array of conversations")
    return records


def load_conversations(path, vocab: Vocabulary | None = None, labels: LabelSet | None = None,
                       speakers: dict | None = None):
    """Load a conversation file.  Builds the vocabulary (and label set) when absent.

    Returns ``(conversations, vocab, labels)``.
    """
    records = read_json(path)
    if vocab is None:
        vocab = build_vocab(records)
    grow = labels is None
    if labels is None:
        labels = LabelSet()
    convs = parse_conversations(records, vocab, labels, speakers, grow_labels=grow)
    return convs, vocab, labels


def conversation_to_json(conv: Conversation, labels: LabelSet):
    utts = []
    for u in conv.utterances:
        rec = {"text": u.raw_text}
        if conv.speakers_given:
            rec["speaker"] = u.speaker if u.speaker is not None else str(u.speaker_id)
        if u.label is not None:
            rec["label"] = labels.itos[u.label]
        if u.rule is not None:
            rec["rule"] = u.rule
        utts.append(rec)
    return {"conversation_id": conv.conversation_id, "utterances": utts}


def dump_conversations(convs, labels: LabelSet, path=None):
    text = json.dumps([conversation_to_json(c, labels) for c in convs], ensure_ascii=False, indent=1)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


# -- synthetic dialogs -----------------------------------------------------

EMOTIONS = ("happy", "sad", "angry", "calm")
KEYWORDS = {
    "happy": ("glad", "delighted"),
    "sad": ("gloomy", "down"),
    "angry": ("furious", "mad"),
    "calm": ("relaxed", "easy"),
}
# Cue phrases tell which rule labels the utterance; they never reveal the label itself.
CUES = {
    "LOCAL": ("now", "honestly"),
    "INTRA": ("still", "again"),
    "INTER": ("you made me", "because of you"),
}
FILLERS = ("the", "weather", "today", "work", "was", "and", "then", "we", "talked",
           "about", "it", "so", "well", "maybe", "later", "dinner", "movie", "yes", "no", "ok")
SPEAKER_NAMES = ("A", "B", "C", "D")


def synth_labels():
    return LabelSet(EMOTIONS)


def _replay_label(history, idx, rule):
    """Emotion implied by ``rule`` for utterance ``idx`` given (speaker, emotion) history."""
    spk = history[idx][0]
    if rule == "LOCAL":
        return history[idx][1]
    for j in range(idx - 1, -1, -1):
        same = history[j][0] == spk
        if (rule == "INTRA" and same) or (rule == "INTER" and not same):
            return history[j][1]
    return None


def replay_rules(conv: Conversation, labels: LabelSet):
    """Recompute every label from the transcript alone; returns label ids."""
    emo_of = {kw: e for e, kws in KEYWORDS.items() for kw in kws}
    history = []
    for u in conv.utterances:
        kws = [emo_of[w] for w in split_words(u.raw_text) if w in emo_of]
        history.append((u.speaker_id, kws[0] if kws else None))
    out = []
    for i, u in enumerate(conv.utterances):
        emo = _replay_label(history, i, u.rule)
        out.append(None if emo is None else labels[emo])
    return out


def synth_generate(seed, n_conversations, speakers=(2, 4), length=(3, 8),
                   task_mix=(1 / 3, 1 / 3, 1 / 3), fillers=(0, 2), id_prefix="synth"):
    """Generate labelled dialogs whose labels follow LOCAL / INTRA / INTER rules.

    Every utterance carries one emotion keyword drawn uniformly at random and
    a cue phrase naming its rule.  The label is the keyword of the current
    utterance (LOCAL), of the same speaker's previous utterance (INTRA), or of
    the most recent utterance by another party (INTER).  When the referenced
    utterance does not exist yet the rule falls back to LOCAL.  Speaker turns
    are random, so who said what is only recoverable from speaker identity.

    Returns ``(conversations, vocab, labels)``.
    """
    mix = np.asarray(task_mix, dtype=float)
    if mix.shape != (3,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0):
        raise ValueError(f"task_mix must be three non-negative weights summing to 1, got {task_mix}")
    lo_s, hi_s = (speakers, speakers) if isinstance(speakers, int) else speakers
    if not 2 <= lo_s <= hi_s <= len(SPEAKER_NAMES):
        raise ValueError(f"speakers must lie in 2..{len(SPEAKER_NAMES)}")
    lo_n, hi_n = length
    if not 1 <= lo_n <= hi_n:
        raise ValueError(f"invalid length range {length}")
    rng = np.random.default_rng(seed)
    labels = synth_labels()
    records = []
    for c in range(n_conversations):
        n_spk = int(rng.integers(lo_s, hi_s + 1))
        n_utt = int(rng.integers(lo_n, hi_n + 1))
        # first turns cycle through the party so every speaker appears early
        spk_seq = [i % n_spk if i < n_spk else int(rng.integers(n_spk)) for i in range(n_utt)]
        history = []
        utts = []
        for i, spk in enumerate(spk_seq):
            emo = EMOTIONS[int(rng.integers(len(EMOTIONS)))]
            history.append((spk, emo))
            rule = RULES[int(rng.choice(3, p=mix))]
            target = _replay_label(history, i, rule)
            if target is None:
                rule, target = "LOCAL", emo
            cue = CUES[rule][int(rng.integers(2))]
            kw = KEYWORDS[emo][int(rng.integers(2))]
            n_fill = int(rng.integers(fillers[0], fillers[1] + 1))
            words = [FILLERS[int(k)] for k in rng.integers(len(FILLERS), size=n_fill)]
            pos = int(rng.integers(len(words) + 1))
            words = words[:pos] + [kw] + words[pos:]
            text = " ".join([cue, *words])
            utts.append({"speaker": SPEAKER_NAMES[spk], "text": text, "label": target, "rule": rule})
        records.append({"conversation_id": f"{id_prefix}-{c:05d}", "utterances": utts})
    vocab = Vocabulary()
    for words in (FILLERS, *KEYWORDS.values(), *(s.split() for v in CUES.values() for s in v)):
        for w in words:
            vocab.add(w)
    speaker_map = {n: i for i, n in enumerate(SPEAKER_NAMES)}
    convs = parse_conversations(records, vocab, labels, speaker_map)
    return convs, vocab, labels
