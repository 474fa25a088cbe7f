"""Special token ids.  Content words start at ``FIRST_WORD``."""

PAD = 0
BOG = 1
EOS = 2
MASK = 3
FIRST_WORD = 4

SPECIAL_NAMES = ("[pad]", "[bog]", "[eos]", "[mask]")

# never emitted by a decoder
UNGENERATABLE = (PAD, BOG, MASK)
