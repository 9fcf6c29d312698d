#!/usr/bin/env python3
"""Writes the small synthetic corpus used by the example configs."""

import json
import random
import sys
from pathlib import Path

ANIMALS = ["cat", "dog", "fox", "owl", "hen", "bee", "ant", "cow", "pig", "yak", "eel", "bat"]
PLACES = ["barn", "field", "river", "forest", "garden", "hill", "pond", "road", "house", "meadow"]
FOODS = ["seeds", "apples", "fish", "grass", "honey", "bread", "corn", "berries"]
VERBS = ["sees", "chases", "follows", "watches", "greets", "helps"]
ADJS = ["small", "quick", "sleepy", "brown", "old", "young", "loud", "quiet"]


def sentence(rng):
    a, b = rng.sample(ANIMALS, 2)
    kind = rng.randrange(4)
    if kind == 0:
        return f"the {rng.choice(ADJS)} {a} {rng.choice(VERBS)} the {b} near the {rng.choice(PLACES)}."
    if kind == 1:
        return f"every morning the {a} eats {rng.choice(FOODS)} in the {rng.choice(PLACES)}."
    if kind == 2:
        return f"the {a} and the {b} walk to the {rng.choice(PLACES)} together."
    return f"a {rng.choice(ADJS)} {a} sleeps in the {rng.choice(PLACES)} at night."


def text(rng, n):
    lines, line = [], []
    for _ in range(n):
        line.append(sentence(rng))
        if len(line) == 4:
            lines.append(" ".join(line))
            line = []
    return "\n".join(lines) + "\n"


def cloze(rng, n):
    # each frame has one grammatical ending; the others belong to different frames
    endings = [" at night.", " together.", " near the barn."]
    items = []
    for _ in range(n):
        a, b = rng.sample(ANIMALS, 2)
        kind = rng.randrange(3)
        if kind == 0:
            context = f"a {rng.choice(ADJS)} {a} sleeps in the {rng.choice(PLACES)}"
        elif kind == 1:
            context = f"the {a} and the {b} walk to the {rng.choice(PLACES)}"
        else:
            context = f"the {rng.choice(ADJS)} {a} {rng.choice(VERBS)} the {b}"
        items.append({"context": context, "candidates": endings, "gold": kind})
    return items


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "configs" / "data"
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(7)
    (out / "train.txt").write_text(text(rng, 3000))
    (out / "eval.txt").write_text(text(rng, 400))
    with open(out / "cloze.jsonl", "w") as f:
        for item in cloze(rng, 100):
            f.write(json.dumps(item) + "\n")


if __name__ == "__main__":
    main()
