"""Deterministic generator for the bundled toy corpora and task fixtures.

``python -m minibert.fixtures`` rewrites ``fixture_data/``; the test suite
checks the bundled files match a fresh generation byte for byte.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from .tokenizer import SPECIAL_TOKENS

DATA_DIR = Path(__file__).parent / "fixture_data"

TOPICS = {
    "animals": (["cat", "dog", "horse", "rabbit", "mouse", "bird"], ["chases", "feeds", "watches"], ["furry", "small"]),
    "food": (["bread", "cheese", "apple", "soup", "rice", "cake"], ["cooks", "eats", "bakes"], ["fresh", "sweet"]),
    "weather": (["rain", "snow", "wind", "cloud", "storm", "sun"], ["covers", "soaks", "freezes"], ["cold", "wet"]),
    "sports": (["ball", "goal", "team", "coach", "match", "player"], ["kicks", "wins", "scores"], ["fast", "strong"]),
    "music": (["song", "drum", "piano", "guitar", "band", "singer"], ["plays", "tunes", "sings"], ["loud", "soft"]),
    "travel": (["train", "ticket", "station", "map", "bag", "road"], ["boards", "books", "packs"], ["late", "busy"]),
    "garden": (["rose", "tree", "seed", "leaf", "root", "flower"], ["waters", "plants", "prunes"], ["green", "tall"]),
    "school": (["teacher", "pupil", "lesson", "book", "desk", "exam"], ["teaches", "reads", "grades"], ["clever", "quiet"]),
    "sea": (["ship", "wave", "fish", "sail", "shore", "whale"], ["sails", "swims", "drifts"], ["blue", "deep"]),
    "city": (["street", "tower", "bridge", "park", "shop", "car"], ["builds", "drives", "parks"], ["crowded", "noisy"]),
    "space": (["star", "planet", "moon", "rocket", "comet", "orbit"], ["launches", "circles", "glows"], ["dark", "distant"]),
    "kitchen": (["pan", "knife", "spoon", "oven", "plate", "bowl"], ["stirs", "washes", "heats"], ["clean", "hot"]),
    "forest": (["wolf", "bear", "deer", "owl", "fox", "pine"], ["hunts", "hides", "roams"], ["wild", "shy"]),
    "office": (["desk", "email", "memo", "meeting", "report", "printer"], ["sends", "files", "prints"], ["urgent", "long"]),
    "farm": (["cow", "sheep", "barn", "tractor", "goat", "hen"], ["milks", "herds", "ploughs"], ["muddy", "old"]),
    "art": (["paint", "brush", "canvas", "artist", "colour", "sketch"], ["draws", "mixes", "frames"], ["bright", "bold"]),
}
COMMON = ["the", "a", "and", "is", "of", "to", "with", "near", "what", "who", "does", "my", "he", "she", "it",
          "went", "bought", "gallon", "milk", "man", "store", "are", "hairy", "penguin", "flight", "new",
          "yo", "good", "great", "happy", "nice", "bad", "sad", "poor", "awful", "movie", "was", "very"]
PIECES = ["##s", "##less", "##rk", "##ing", "##ed"]
PUNCT = [".", ",", "?", "!", "'"]
CLOZE_BASE = ["b0", "b1", "b2", "b3"]
CLOZE_TOKENS = [f"c{i}{j}" for i in range(4) for j in range(4)]

POSITIVE = ["good", "great", "happy", "nice"]
NEGATIVE = ["bad", "sad", "poor", "awful"]


def vocab_tokens() -> list[str]:
    seen, out = set(), []
    words = []
    for nouns, verbs, adjs in TOPICS.values():
        words.extend(nouns + verbs + adjs)
    for tok in list(SPECIAL_TOKENS) + PUNCT + COMMON + words + PIECES + CLOZE_BASE + CLOZE_TOKENS:
        if tok not in seen:
            seen.add(tok)
            out.append(tok)
    return out


def _sentence(rng, topic: str) -> str:
    nouns, verbs, adjs = TOPICS[topic]

    def n():
        w = nouns[rng.integers(len(nouns))]
        return w + "s" if rng.random() < 0.2 else w

    v = verbs[rng.integers(len(verbs))]
    a = adjs[rng.integers(len(adjs))]
    form = rng.integers(4)
    if form == 0:
        return f"the {a} {n()} {v} the {n()} ."
    if form == 1:
        return f"a {n()} {v} the {a} {n()} ."
    if form == 2:
        return f"the {n()} and the {n()} {v} a {n()} ."
    return f"the {n()} {v} the {n()} near the {a} {n()} ."


def topic_corpus(seed: int, docs_per_topic: int, sentences: tuple[int, int]) -> str:
    """Documents whose sentences all share one topic; topics differ between documents."""
    rng = np.random.default_rng(seed)
    order = [t for t in TOPICS for _ in range(docs_per_topic)]
    rng.shuffle(order)
    docs = []
    for topic in order:
        k = int(rng.integers(sentences[0], sentences[1] + 1))
        docs.append("\n".join(_sentence(rng, topic) for _ in range(k)))
    return "\n\n".join(docs) + "\n"


def cloze_sentence(rng, n_base: int = 4) -> str:
    """``b c b c b c b`` where each c token names its left and right neighbours."""
    base = [int(rng.integers(len(CLOZE_BASE))) for _ in range(n_base)]
    out = [CLOZE_BASE[base[0]]]
    for left, right in zip(base, base[1:]):
        out += [f"c{left}{right}", CLOZE_BASE[right]]
    return " ".join(out)


def cloze_corpus(seed: int, n_docs: int, per_doc: int) -> str:
    rng = np.random.default_rng(seed)
    docs = ["\n".join(cloze_sentence(rng) for _ in range(per_doc)) for _ in range(n_docs)]
    return "\n\n".join(docs) + "\n"


def cls_rows(seed: int, n: int) -> str:
    rng = np.random.default_rng(seed)
    topics = list(TOPICS)
    rows = []
    for _ in range(n):
        label = int(rng.integers(2))
        word = (POSITIVE if label else NEGATIVE)[rng.integers(4)]
        nouns = TOPICS[topics[rng.integers(len(topics))]][0]
        noun = nouns[rng.integers(len(nouns))]
        if rng.random() < 0.5:
            text = f"the {noun} is {word} ."
        else:
            text = f"the {noun} was very {word} !"
        rows.append(f"{label}\t{text}")
    return "\n".join(rows) + "\n"


def span_rows(seed: int, n: int, unanswerable: float = 0.0) -> str:
    rng = np.random.default_rng(seed)
    topics = list(TOPICS)
    rows = []
    for _ in range(n):
        topic = topics[rng.integers(len(topics))]
        nouns, verbs, _ = TOPICS[topic]
        picks = rng.choice(len(nouns), size=5, replace=False)
        subj1, obj1, subj2, obj2, absent = (nouns[i] for i in picks)
        v1, v2 = (verbs[i] for i in rng.choice(len(verbs), size=2, replace=False))
        context = f"the {subj1} {v1} the {obj1} . the {subj2} {v2} the {obj2} ."
        ask_first = rng.random() < 0.5
        if rng.random() < unanswerable:
            question = f"what does the {absent} {v1 if ask_first else v2} ?"
            answers = []
        else:
            subj, verb, obj = (subj1, v1, obj1) if ask_first else (subj2, v2, obj2)
            question = f"what does the {subj} {verb} ?"
            start = context.index(f"{subj} {verb} the {obj}") + len(f"{subj} {verb} the ")
            answers = [{"text": obj, "answer_start": start}]
        rows.append(json.dumps({"question": question, "context": context, "answers": answers}, sort_keys=True))
    return "\n".join(rows) + "\n"


def choice_rows(seed: int, n: int) -> str:
    rng = np.random.default_rng(seed)
    topics = list(TOPICS)
    rows = []
    for _ in range(n):
        picks = [topics[i] for i in rng.choice(len(topics), size=4, replace=False)]
        label = int(rng.integers(4))
        context = _sentence(rng, picks[0])
        others = picks[1:]
        choices = []
        for k in range(4):
            choices.append(_sentence(rng, picks[0] if k == label else others.pop()))
        rows.append(json.dumps({"context": context, "choices": choices, "label": label}, sort_keys=True))
    return "\n".join(rows) + "\n"


def tag_rows(seed: int, n: int) -> str:
    """Word-class tagging; plural nouns and 'york' exercise multi-piece words."""
    rng = np.random.default_rng(seed)
    topics = list(TOPICS)
    sents = []
    for _ in range(n):
        nouns, verbs, adjs = TOPICS[topics[rng.integers(len(topics))]]
        noun1 = nouns[rng.integers(len(nouns))] + ("s" if rng.random() < 0.3 else "")
        noun2 = nouns[rng.integers(len(nouns))] + ("s" if rng.random() < 0.3 else "")
        rows = [("the", "O"), (adjs[rng.integers(len(adjs))], "ADJ"), (noun1, "NOUN"),
                (verbs[rng.integers(len(verbs))], "VERB"), ("the", "O"), (noun2, "NOUN")]
        if rng.random() < 0.4:
            rows += [("near", "O"), ("new", "PLACE"), ("york", "PLACE")]
        rows.append((".", "O"))
        sents.append("\n".join(f"{w}\t{t}" for w, t in rows))
    return "\n\n".join(sents) + "\n"


def generate() -> dict[str, str]:
    return {
        "vocab.txt": "\n".join(vocab_tokens()) + "\n",
        "toy_corpus.txt": topic_corpus(11, 2, (5, 7)),
        "toy_corpus_dev.txt": topic_corpus(12, 1, (5, 7)),
        "cloze_train.txt": cloze_corpus(21, 40, 5),
        "cloze_dev.txt": cloze_corpus(22, 10, 5),
        "cls_train.tsv": cls_rows(31, 256),
        "cls_dev.tsv": cls_rows(32, 32),
        "span_train.jsonl": span_rows(41, 64),
        "span_dev.jsonl": span_rows(42, 32),
        "span_v2_train.jsonl": span_rows(43, 64, unanswerable=0.3),
        "span_v2_dev.jsonl": span_rows(44, 32, unanswerable=0.3),
        "choice_train.jsonl": choice_rows(51, 64),
        "choice_dev.jsonl": choice_rows(52, 32),
        "tag_train.txt": tag_rows(61, 96),
        "tag_dev.txt": tag_rows(62, 48),
    }


def fixture_path(name: str) -> Path:
    return DATA_DIR / name


def write_fixtures(directory: Path = DATA_DIR) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in generate().items():
        (directory / name).write_text(text, encoding="utf-8")


if __name__ == "__main__":
    write_fixtures(Path(sys.argv[1]) if len(sys.argv) > 1 else DATA_DIR)
