#!/usr/bin/env python3
"""Generate the synthetic English-like training corpus used by the desk runs.

The text comes from a small stochastic grammar, so a byte-level model of a
few hundred thousand parameters can learn real structure from it (spelling,
agreement, punctuation, recurring names) while the file stays reproducible
from a seed.

    python3 tools/gen_corpus.py --out data/corpus.txt --bytes 600000 --seed 7
    python3 tools/gen_corpus.py --out data/smoke.txt --bytes 64 --seed 1
"""

import argparse
import random

NAMES = ["Ada", "Bram", "Cora", "Dev", "Elin", "Farid", "Gus", "Hana", "Ivo", "Juno", "Kai", "Lena",
         "Milo", "Nia", "Otto", "Pia", "Quin", "Rosa", "Sami", "Tova"]
PLACES = ["the harbor", "the old mill", "the market", "the library", "the north field", "the bridge",
          "the bakery", "the station", "the garden", "the river bank", "the workshop", "the hill"]
OBJECTS = ["lantern", "map", "basket", "letter", "key", "kettle", "violin", "compass", "notebook",
           "ladder", "blanket", "clock", "rope", "bucket", "pencil", "boat"]
ADJS = ["small", "heavy", "bright", "quiet", "old", "green", "broken", "warm", "strange", "tiny",
        "wooden", "silver", "careful", "tired", "happy", "cold"]
# (past, present, base)
VERBS_T = [("found", "finds", "find"), ("carried", "carries", "carry"), ("painted", "paints", "paint"),
           ("fixed", "fixes", "fix"), ("dropped", "drops", "drop"), ("opened", "opens", "open"),
           ("cleaned", "cleans", "clean"), ("borrowed", "borrows", "borrow"), ("sold", "sells", "sell"),
           ("hid", "hides", "hide")]
VERBS_I = [("walked", "walks", "walk"), ("waited", "waits", "wait"), ("laughed", "laughs", "laugh"),
           ("slept", "sleeps", "sleep"), ("sang", "sings", "sing"), ("worked", "works", "work"),
           ("rested", "rests", "rest"), ("listened", "listens", "listen")]
TIMES = ["In the morning", "At noon", "Later that day", "Before dinner", "After the rain",
         "On Sunday", "That evening", "Every spring", "At dawn", "Once"]
CONNECT = ["because", "so", "but", "and then", "while", "although"]
NUMBERS = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "twelve"]


def noun_phrase(rng):
    obj = rng.choice(OBJECTS)
    if rng.random() < 0.5:
        return f"the {rng.choice(ADJS)} {obj}"
    if rng.random() < 0.3:
        n = rng.choice(NUMBERS)
        return f"{n} {obj}s"
    return f"a {obj}" if obj[0] not in "aeiou" else f"an {obj}"


def clause(rng, tense):
    who = rng.choice(NAMES)
    if rng.random() < 0.6:
        verb = rng.choice(VERBS_T)[tense]
        out = f"{who} {verb} {noun_phrase(rng)}"
    else:
        verb = rng.choice(VERBS_I)[tense]
        out = f"{who} {verb}"
    if rng.random() < 0.5:
        out += f" near {rng.choice(PLACES)}"
    return out


def sentence(rng):
    tense = 1 if rng.random() < 0.3 else 0
    s = clause(rng, tense)
    if rng.random() < 0.4:
        s = f"{rng.choice(TIMES)}, {s[0].lower() + s[1:] if s.split()[0] not in NAMES else s}"
    if rng.random() < 0.35:
        s += f" {rng.choice(CONNECT)} {clause(rng, tense)}"
    end = "." if rng.random() < 0.85 else ("!" if rng.random() < 0.5 else "?")
    if end == "?":
        s = f"Did {clause(rng, 2)}"
    return s + end


def dialogue(rng):
    a, b = rng.sample(NAMES, 2)
    obj = rng.choice(OBJECTS)
    return (f'"Where is the {obj}?" asked {a}. '
            f'"It is at {rng.choice(PLACES)}," said {b}.')


def paragraph(rng):
    parts = []
    for _ in range(rng.randint(3, 7)):
        parts.append(dialogue(rng) if rng.random() < 0.15 else sentence(rng))
    return " ".join(parts)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--bytes", type=int, default=600_000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    chunks, size = [], 0
    while size < args.bytes:
        p = paragraph(rng) + "\n\n"
        chunks.append(p)
        size += len(p)
    text = "".join(chunks)[: args.bytes]
    with open(args.out, "w", encoding="ascii", newline="\n") as f:
        f.write(text)


if __name__ == "__main__":
    main()
