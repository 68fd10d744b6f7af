"""
Corpus-derived greedy sub-word tokenizer.

The vocabulary starts from every character seen in the corpus, in both its
word-initial form ("a") and its continuation form ("##a"), and grows by
repeatedly merging the most frequent adjacent piece pair until the target
size is reached or no pair is left. Because both forms of every character
are seeded, build_vocab needs a target larger than the four reserved tokens
plus twice the character count; smaller targets raise DataError.
Encoding is greedy longest-match inside
each whitespace-delimited word; a word that cannot be matched becomes a
single [UNK] piece spanning the whole word. No case folding or Unicode
normalisation is applied.
"""
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

from common.errors import DataError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
CONTINUATION = "##"
NO_OFFSET = (-1, -1)
NO_WORD = -1

_word_re = re.compile(r"\S+")


@dataclass(frozen=True)
class Vocab:
    tokens: Tuple[str, ...]
    ids: Dict[str, int] = field(compare=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise DataError(f"reserved tokens must occupy ids 0-3, got {self.tokens[:4]}")
        ids = {t: i for i, t in enumerate(self.tokens)}
        if len(ids) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def id_of(self, token: str) -> int:
        return self.ids.get(token, UNK_ID)


@dataclass
class Encoding:
    token_ids: List[int]
    segment_ids: List[int]
    attention_mask: List[int]
    offsets: List[Tuple[int, int]]
    word_index: List[int]

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def length(self) -> int:
        return sum(self.attention_mask)


def _merged(left: str, right: str) -> str:
    return left + right[len(CONTINUATION):]


def build_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    word_freq: Counter = Counter()
    for text in corpus:
        word_freq.update(_word_re.findall(text))
    if not word_freq:
        raise DataError("cannot build a vocabulary from an empty corpus")

    alphabet = set()
    for word in word_freq:
        for ch in word:
            alphabet.add(ch)
            alphabet.add(CONTINUATION + ch)
    if target_size <= len(RESERVED) + len(alphabet):
        raise DataError(
            f"target size {target_size} leaves no room beyond {len(RESERVED)} reserved and {len(alphabet)} character tokens"
        )

    tokens: List[str] = list(RESERVED) + sorted(alphabet)
    known = set(tokens)
    splits: Dict[str, List[str]] = {
        w: [w[0]] + [CONTINUATION + c for c in w[1:]] for w in word_freq
    }

    while len(tokens) < target_size:
        pair_freq: Counter = Counter()
        for word, freq in word_freq.items():
            pieces = splits[word]
            for a, b in zip(pieces, pieces[1:]):
                pair_freq[(a, b)] += freq
        if not pair_freq:
            break

        # highest count first, lexicographically smallest pair on ties
        best = min(pair_freq, key=lambda p: (-pair_freq[p], p))
        new_token = _merged(*best)
        for word, pieces in splits.items():
            if len(pieces) < 2:
                continue
            out: List[str] = []
            i = 0
            while i < len(pieces):
                if i + 1 < len(pieces) and (pieces[i], pieces[i + 1]) == best:
                    out.append(new_token)
                    i += 2
                else:
                    out.append(pieces[i])
                    i += 1
            splits[word] = out
        if new_token not in known:
            known.add(new_token)
            tokens.append(new_token)

    return Vocab(tuple(tokens))


def save_vocab(vocab: Vocab, stream: TextIO) -> None:
    for token in vocab.tokens:
        stream.write(token + "\n")


def load_vocab(stream: TextIO) -> Vocab:
    return Vocab(tuple(line.rstrip("\n") for line in stream if line.rstrip("\n")))


def _word_pieces(word: str, vocab: Vocab) -> Optional[List[Tuple[str, int, int]]]:
    """Greedy longest-match; (piece, start, end) relative to the word."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end] if start == 0 else CONTINUATION + word[start:end]
            if piece in vocab:
                found = piece
                break
            end -= 1
        if found is None:
            return None
        pieces.append((found, start, end))
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> List[Tuple[int, Tuple[int, int], int]]:
    """(token id, char offsets, word index) for every piece of `text`."""
    out = []
    for w, m in enumerate(_word_re.finditer(text)):
        word, base = m.group(), m.start()
        pieces = _word_pieces(word, vocab)
        if pieces is None:
            out.append((UNK_ID, (base, m.end()), w))
            continue
        for piece, s, e in pieces:
            out.append((vocab.ids[piece], (base + s, base + e), w))
    return out


def _pad(enc: Encoding, max_len: int) -> Encoding:
    missing = max_len - len(enc.token_ids)
    enc.token_ids += [PAD_ID] * missing
    enc.segment_ids += [0] * missing
    enc.attention_mask += [0] * missing
    enc.offsets += [NO_OFFSET] * missing
    enc.word_index += [NO_WORD] * missing
    return enc


def encode_single(text: str, vocab: Vocab, max_len: int) -> Encoding:
    if max_len < 3:
        raise DataError(f"max_len must be at least 3, got {max_len}")
    pieces = tokenize(text, vocab)[: max_len - 2]
    enc = Encoding(
        token_ids=[CLS_ID] + [p[0] for p in pieces] + [SEP_ID],
        segment_ids=[0] * (len(pieces) + 2),
        attention_mask=[1] * (len(pieces) + 2),
        offsets=[NO_OFFSET] + [p[1] for p in pieces] + [NO_OFFSET],
        word_index=[NO_WORD] + [p[2] for p in pieces] + [NO_WORD],
    )
    return _pad(enc, max_len)


def truncate_pair(
    a: List, b: List, budget: int
) -> Tuple[List, List]:
    """Drop trailing pieces from the longer side until both fit; the first
    side gives way when they are equally long."""
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def encode_pair(a: str, b: str, vocab: Vocab, max_len: int) -> Encoding:
    if max_len < 5:
        raise DataError(f"max_len must be at least 5 for pairs, got {max_len}")
    pa, pb = truncate_pair(tokenize(a, vocab), tokenize(b, vocab), max_len - 3)
    enc = Encoding(
        token_ids=[CLS_ID] + [p[0] for p in pa] + [SEP_ID] + [p[0] for p in pb] + [SEP_ID],
        segment_ids=[0] * (len(pa) + 2) + [1] * (len(pb) + 1),
        attention_mask=[1] * (len(pa) + len(pb) + 3),
        offsets=[NO_OFFSET] + [p[1] for p in pa] + [NO_OFFSET] + [p[1] for p in pb] + [NO_OFFSET],
        word_index=[NO_WORD] + [p[2] for p in pa] + [NO_WORD] + [p[2] for p in pb] + [NO_WORD],
    )
    return _pad(enc, max_len)


def decode(token_ids: Sequence[int], vocab: Vocab) -> str:
    words: List[str] = []
    for i in token_ids:
        if i in (PAD_ID, CLS_ID, SEP_ID):
            continue
        token = vocab.tokens[i]
        if token.startswith(CONTINUATION) and words:
            words[-1] += token[len(CONTINUATION):]
        else:
            words.append(token)
    return " ".join(words)
