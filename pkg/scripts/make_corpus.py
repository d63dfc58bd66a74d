"""Regenerate the bundled corpus: short synthetic stories from a seeded grammar.

Each story introduces a handful of characters, places and objects and keeps
referring back to them, so a model that can copy from its context does
noticeably better than a bag-of-bytes model.

    python scripts/make_corpus.py --out src/supra/corpus/tiny_corpus.txt --mb 1.2
"""

import argparse
import random
from pathlib import Path

NAMES = ["Ada", "Bram", "Cora", "Dmitri", "Elsie", "Fenn", "Greta", "Hugo", "Ines", "Jonah", "Kira", "Lev",
         "Mara", "Nils", "Odile", "Pavel", "Quinn", "Rosa", "Silas", "Tova", "Ulric", "Vera", "Wren", "Yusuf",
         "Zora", "Anton", "Bea", "Cyril", "Dora", "Emil"]
PLACES = ["the mill", "the harbor", "the old library", "the orchard", "the bridge", "the market", "the chapel",
          "the forge", "the lighthouse", "the meadow", "the cellar", "the station", "the bakery", "the tower"]
OBJECTS = ["a lantern", "a map", "a silver key", "a basket of apples", "a letter", "a compass", "a red scarf",
           "a wooden box", "a violin", "a loaf of bread", "a pocket watch", "a kite", "a jar of honey", "a rope"]
WEATHER = ["It was raining.", "The sun was low.", "Snow covered the roofs.", "A cold wind blew from the sea.",
           "The air was warm and still.", "Fog hung over the river."]
FEEL = ["glad", "tired", "curious", "worried", "proud", "quiet", "hungry", "afraid"]
NUMBERS = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]


def the(obj: str) -> str:
    return "the " + obj.split(" ", 1)[1]


def story(rng: random.Random) -> str:
    cast = rng.sample(NAMES, rng.randint(2, 4))
    places = rng.sample(PLACES, 3)
    things = rng.sample(OBJECTS, 3)
    held = {}
    lines = [rng.choice(WEATHER)]
    a = cast[0]
    lines.append(f"{a} lived near {places[0]} and kept {things[0]} by the door.")
    held[a] = things[0]
    for _ in range(rng.randint(6, 14)):
        kind = rng.random()
        x, y = rng.sample(cast, 2)
        p = rng.choice(places)
        if kind < 0.2:
            lines.append(f"{x} walked to {p} to meet {y}.")
        elif kind < 0.4 and x in held:
            obj = held.pop(x)
            held[y] = obj
            lines.append(f"{x} gave {the(obj)} to {y}, and {y} said thank you.")
        elif kind < 0.55:
            obj = rng.choice(things)
            held[x] = obj
            lines.append(f"At {p}, {x} found {obj}.")
        elif kind < 0.7:
            n = rng.choice(NUMBERS)
            lines.append(f"{x} counted {n} boats, then {y} counted {n} more.")
        elif kind < 0.85:
            lines.append(f"{x} felt {rng.choice(FEEL)}, so {x} sat with {y} until evening.")
        else:
            who = rng.choice(list(held)) if held else x
            if who in held:
                lines.append(f"\"Where is {the(held[who])}?\" asked {x}. \"{who} has it,\" said {y}.")
            else:
                lines.append(f"{x} asked {y} about {p}.")
    lines.append(f"In the end {a} went home to {places[0]}.")
    return " ".join(lines)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="src/supra/corpus/tiny_corpus.txt")
    ap.add_argument("--mb", type=float, default=1.2)
    ap.add_argument("--seed", type=int, default=1234)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    docs, size = [], 0
    while size < args.mb * 1e6:
        s = story(rng)
        docs.append(s)
        size += len(s) + 2
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n\n".join(docs) + "\n")
    print(f"wrote {len(docs)} stories, {out.stat().st_size} bytes to {out}")


if __name__ == "__main__":
    main()
