"""Byte-level BPE tokenizer: trainer, codec, and vocab file format.

No pre-tokenization: training and encoding operate on raw UTF-8 bytes, so
any unicode input round-trips and mixed-language text needs no language
rules. Special tokens sit at the lowest ids and never collide with text.
"""

from dataclasses import dataclass

from .errors import VocabularyError

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
N_BYTE_TOKENS = 256
BASE_SIZE = len(SPECIAL_TOKENS) + N_BYTE_TOKENS
DEFAULT_TARGET_SIZE = 64896

_MAGIC = "bpevocab"
_VERSION = "1"


@dataclass(frozen=True)
class Vocab:
    merges: tuple            # ((left_bytes, right_bytes), ...) in training order
    id_to_token: tuple       # byte sequence per id; specials map to b""
    special_tokens: tuple = SPECIAL_TOKENS

    def __post_init__(self):
        ranks = {pair: i for i, pair in enumerate(self.merges)}
        token_ids = {tok: i for i, tok in enumerate(self.id_to_token)
                     if i >= len(self.special_tokens)}
        object.__setattr__(self, "_ranks", ranks)
        object.__setattr__(self, "_token_ids", token_ids)

    def __len__(self):
        return len(self.id_to_token)


def _base_table() -> list:
    return [b"" for _ in SPECIAL_TOKENS] + [bytes([b]) for b in range(N_BYTE_TOKENS)]


def _merge_pass(seq: list, pair: tuple, merged: bytes) -> list:
    """Replace occurrences of pair left to right in a single pass."""
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def bpe_train(corpus, target_size: int) -> Vocab:
    """Greedy pair merging from a 256-entry byte alphabet.

    Most frequent adjacent pair wins each round; ties go to the
    lexicographically smallest pair. Stops at target_size or when no pair
    occurs twice. Pairs never span text boundaries.
    """
    if target_size < BASE_SIZE:
        raise ValueError(f"target_size must be at least {BASE_SIZE}")
    seqs = [[bytes([b]) for b in text.encode("utf-8")] for text in corpus]
    if not any(seqs):
        raise ValueError("cannot train on an empty corpus")

    table = _base_table()
    merges = []
    while len(table) < target_size:
        counts: dict = {}
        for seq in seqs:
            for a, b in zip(seq, seq[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + 1
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        pair = min(p for p, c in counts.items() if c == best_count)
        merged = pair[0] + pair[1]
        merges.append(pair)
        table.append(merged)
        seqs = [_merge_pass(seq, pair, merged) for seq in seqs]
    return Vocab(merges=tuple(merges), id_to_token=tuple(table))


def encode(text: str, vocab: Vocab) -> list:
    """UTF-8 bytes, then merges applied in training order (the earliest
    applicable rule always wins). Never fails on any unicode input."""
    seq = [bytes([b]) for b in text.encode("utf-8")]
    ranks = vocab._ranks
    while len(seq) >= 2:
        best_rank = None
        best_pair = None
        for a, b in zip(seq, seq[1:]):
            r = ranks.get((a, b))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
                best_pair = (a, b)
        if best_pair is None:
            break
        seq = _merge_pass(seq, best_pair, best_pair[0] + best_pair[1])
    ids = vocab._token_ids
    return [ids[tok] for tok in seq]


def decode(ids, vocab: Vocab) -> str:
    """Concatenate byte sequences; invalid UTF-8 boundaries are replaced."""
    table = vocab.id_to_token
    parts = []
    for i in ids:
        if not 0 <= i < len(table):
            raise VocabularyError(f"token id {i} out of range for vocab of size {len(table)}")
        parts.append(table[i])
    return b"".join(parts).decode("utf-8", errors="replace")


def save_vocab(path, vocab: Vocab) -> None:
    """Versioned text format: header (version, size, specials), then one
    merge per line in training order, both parts hex-encoded."""
    lines = [" ".join([_MAGIC, _VERSION, str(len(vocab)), *vocab.special_tokens])]
    for left, right in vocab.merges:
        lines.append(f"{left.hex()} {right.hex()}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_vocab(path) -> Vocab:
    """Rebuild the table by replaying merges; validates the header, that
    each merge's parts already exist, and the final size."""
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty vocab file")
    header = lines[0].split(" ")
    if len(header) < 3 or header[0] != _MAGIC:
        raise ValueError(f"{path}: not a vocab file")
    if header[1] != _VERSION:
        raise ValueError(f"{path}: unsupported version {header[1]!r}")
    size = int(header[2])
    specials = tuple(header[3:])
    if not specials:
        raise ValueError(f"{path}: header lists no special tokens")

    table = [b"" for _ in specials] + [bytes([b]) for b in range(N_BYTE_TOKENS)]
    known = set(table[len(specials):])
    merges = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(" ")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected two hex fields")
        try:
            left, right = bytes.fromhex(parts[0]), bytes.fromhex(parts[1])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: invalid hex") from None
        if left not in known or right not in known:
            raise ValueError(f"{path}:{lineno}: merge parts not in vocabulary")
        merges.append((left, right))
        merged = left + right
        table.append(merged)
        known.add(merged)
    if len(table) != size:
        raise ValueError(f"{path}: header claims {size} entries, file builds {len(table)}")
    return Vocab(merges=tuple(merges), id_to_token=tuple(table), special_tokens=specials)
