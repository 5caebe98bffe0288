"""Deterministic word-level tokenizer over a fixed vocabulary.

Layout of the id space (total size ``VOCAB_SIZE``):

    0           BOS
    1           EOS
    2..         lexicon words, in LEXICON order
    lex_end..   out-of-vocabulary range; unknown words hash here (sha1-based,
                stable across runs and platforms)

The empty string tokenizes to ``[BOS, EOS]``, the null-text sequence used for
unconditional prediction.
"""

from __future__ import annotations

import hashlib
import re

from .errors import InvalidInput

BOS = 0
EOS = 1
VOCAB_SIZE = 2048

# Compact lexicon biased toward image-description vocabulary. Order is part
# of the id assignment and must not be rearranged.
LEXICON = (
    "a an the this that of on in at by with and or to from over under is are "
    "one two three red orange yellow green blue purple pink brown black white "
    "gray dark light bright pale deep warm cool small big large tiny huge "
    "tall short wide narrow round square flat soft hard smooth rough shiny "
    "matte old new young ancient modern wooden metal stone glass plastic "
    "paper fabric furry fluffy photo photograph painting drawing sketch "
    "picture image portrait closeup view scene background foreground cat dog "
    "bird fish horse cow sheep rabbit fox bear wolf lion tiger leopard "
    "elephant monkey deer duck chicken owl eagle butterfly bee frog snake "
    "turtle mouse person man woman child boy girl face head hand eye hair "
    "tree flower grass leaf plant bush forest mountain hill rock river lake "
    "sea ocean beach sand sky cloud sun moon star rain snow fog water fire "
    "ice house building tower bridge road street path wall door window roof "
    "fence garden park field farm city town village castle church barn car "
    "truck bus train boat ship plane bicycle motorcycle wheel chair table "
    "bench bed sofa lamp clock mirror vase bowl cup mug plate bottle jar "
    "basket box bag hat shirt dress coat shoe ball book pen toy doll kite "
    "balloon apple banana lemon cherry grape berry strawberry peach pear "
    "melon tomato carrot potato onion mushroom bread cake cookie pie cheese "
    "egg meat pizza burger sandwich soup salad rice pasta standing sitting "
    "lying running walking jumping flying swimming sleeping eating drinking "
    "playing looking smiling wearing holding floating growing glowing "
    "burning frozen broken empty full open closed striped spotted checkered "
    "plaid golden silver wild cute beautiful elegant rustic cozy realistic "
    "detailed blurry sharp vivid colorful monochrome vintage retro"
).split()

assert len(set(LEXICON)) == len(LEXICON), "lexicon must not contain duplicates"

_LEX_IDS = {w: i + 2 for i, w in enumerate(LEXICON)}
OOV_START = 2 + len(LEXICON)
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def oov_id(word: str) -> int:
    digest = hashlib.sha1(word.encode("utf-8")).digest()
    span = VOCAB_SIZE - OOV_START
    return OOV_START + int.from_bytes(digest[:8], "little") % span


def word_id(word: str) -> int:
    return _LEX_IDS.get(word, oov_id(word))


def tokenize(text: str) -> list[int]:
    """Lowercase word tokenization; total function, never raises."""
    words = _TOKEN_RE.findall(text.lower())
    return [BOS, *(word_id(w) for w in words), EOS]


def null_sequence() -> list[int]:
    return [BOS, EOS]


def check_ids(ids: list[int]) -> list[int]:
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise InvalidInput(f"token id {i} outside vocabulary [0, {VOCAB_SIZE})")
    return ids
