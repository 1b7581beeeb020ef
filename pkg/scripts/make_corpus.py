"""Regenerate data/fixture_corpus.txt.

A deterministic pseudo-English byte corpus: sentences assembled from a
fixed word list with a splitmix64-driven bigram preference, so the text
has enough local structure for a small byte model to learn while staying
fully reproducible.  Run from the repository root:

    python scripts/make_corpus.py
"""

from pathlib import Path

from specexit import rng

TARGET_BYTES = 64 * 1024
SEED = 0xC0FFEE

WORDS = (
    "the of a to in is it that was for on are with as his they at be this "
    "from have or by one had not but what all were when we there can an "
    "your which their said if do will each about how up out them then she "
    "many some so these would other into more her two like him see time "
    "could no make than first been its who now people my made over did "
    "down only way find use may water long little very after words called "
    "just where most know get through back much before go good new write "
    "our used me man too any day same right look think also around another "
    "came come work three word must because does part even place well such "
    "here take why things help put years different away again off went old "
    "number great tell men say small every found still between name should "
    "home big give air line set own under read last never us left end along "
    "while might next sound below saw something thought both few those "
    "always show large often together asked house world going want school "
    "important until form food keep children feet land side without boy "
    "once animal life enough took four head above kind began almost live "
    "page got earth need far hand high year mother light country father "
    "let night picture being study second soon story since white ever "
    "paper hard near sentence better best across during today however sure "
    "knew try told young sun thing whole hear example heard several change "
    "answer room sea against top turned learn point city play toward five "
    "himself usually money seen car morning im body upon family later turn "
    "move face door cut done group true half red fish plants living black "
    "eat short united run book gave order open ground cold really table "
    "remember tree course front american space inside ago sad early ill "
    "learned brought close nothing though idea before lived became add "
    "become grow draw yet less wind behind cannot letter among able dog "
    "shown mean english rest perhaps certain six feel fire ready green yes "
    "built special ran full town complete oh person hot anything hold "
    "state list stood hundred ten fast felt kept notice cant strong voice "
    "probably area horse matter stand box start window"
).split()


def main():
    n_words = len(WORDS)
    stream = rng.splitmix64(SEED, TARGET_BYTES)
    pieces = []
    total = 0
    i = 0
    prev = 0
    sentence_len = 0
    while total < TARGET_BYTES:
        z = int(stream[i % stream.size])
        i += 1
        # bigram bias: half the draws stay in a window after the last word
        if z & 1:
            idx = (prev + 1 + (z >> 1) % 16) % n_words
        else:
            idx = (z >> 1) % n_words
        word = WORDS[idx]
        prev = idx
        sentence_len += 1
        if sentence_len == 1:
            word = word.capitalize()
        end = sentence_len >= 6 and (z >> 32) % 8 == 0
        pieces.append(word + (". " if end else " "))
        if end:
            sentence_len = 0
        total += len(pieces[-1])
    text = "".join(pieces)[:TARGET_BYTES]
    out = Path(__file__).resolve().parent.parent / "data" / "fixture_corpus.txt"
    out.parent.mkdir(exist_ok=True)
    out.write_bytes(text.encode("ascii"))
    print(f"wrote {out} ({out.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
