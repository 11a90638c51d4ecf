"""Vocabulary construction, sentence encoding and bucketed batch iteration.

Corpus files are UTF-8 plain text, one sentence per line, whitespace
tokenized; parallel files are aligned by line number. Vocabulary files hold
one token per line where the line number is the id, specials first.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from minimt.errors import ConfigurationError, FormatError, InputError

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN = "<pad>", "<unk>", "<s>", "</s>"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)


class Vocabulary:
    """Bijective token <-> id mapping with fixed special ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise FormatError(
                "vocabulary must start with the special tokens "
                f"{SPECIAL_TOKENS}, got {tuple(tokens[:4])!r}"
            )
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise FormatError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def get_id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def get_token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def to_ids(self, tokens: Iterable[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def to_tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


def build_vocabulary(
    corpus: Iterable[Sequence[str]],
    max_size: int | None = None,
    min_count: int | None = None,
) -> Vocabulary:
    """Frequency-ordered vocabulary; ties broken lexicographically.

    ``max_size`` counts the four specials; tokens seen fewer than
    ``min_count`` times are dropped.
    """
    counts: Counter[str] = Counter()
    sentences = 0
    for tokens in corpus:
        sentences += 1
        counts.update(tokens)
    if sentences == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if min_count is not None:
        items = [(tok, c) for tok, c in items if c >= min_count]
    tokens = list(SPECIAL_TOKENS) + [tok for tok, _ in items]
    if max_size is not None:
        if max_size < len(SPECIAL_TOKENS):
            raise ConfigurationError(
                f"max_size {max_size} cannot hold the {len(SPECIAL_TOKENS)} special tokens"
            )
        tokens = tokens[:max_size]
    return Vocabulary(tokens)


@dataclass(frozen=True)
class EncodedSentence:
    """Token ids for one sentence; targets carry a trailing EOS."""

    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


def encode(tokens: Sequence[str], vocab: Vocabulary, append_eos: bool = False) -> EncodedSentence:
    ids = vocab.to_ids(tokens)
    if append_eos:
        ids.append(EOS_ID)
    return EncodedSentence(tuple(ids))


def decode_ids(ids: Iterable[int], vocab: Vocabulary, strip_specials: bool = True) -> list[str]:
    tokens = []
    for i in ids:
        if strip_specials and i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        tokens.append(vocab.get_token(i))
    return tokens


def read_corpus(path: str) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh]


def read_parallel(source_path: str, target_path: str) -> list[tuple[list[str], list[str]]]:
    src = read_corpus(source_path)
    trg = read_corpus(target_path)
    if len(src) != len(trg):
        raise InputError(
            f"corpora are misaligned: {source_path} has {len(src)} lines, "
            f"{target_path} has {len(trg)}"
        )
    return list(zip(src, trg))


@dataclass
class Batch:
    """PAD-padded id matrices plus true lengths for one training batch."""

    source: np.ndarray  # int64 [b, n_max]
    target: np.ndarray  # int64 [b, m_max], rows end with EOS at position len-1
    source_lengths: np.ndarray
    target_lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.source.shape[0]

    @property
    def target_tokens(self) -> int:
        return int(self.target_lengths.sum())

    def source_mask(self) -> np.ndarray:
        n = self.source.shape[1]
        return np.arange(n)[None, :] < self.source_lengths[:, None]

    def target_mask(self) -> np.ndarray:
        m = self.target.shape[1]
        return np.arange(m)[None, :] < self.target_lengths[:, None]


def make_batch(pairs: Sequence[tuple[EncodedSentence, EncodedSentence]]) -> Batch:
    b = len(pairs)
    n_max = max(len(p[0]) for p in pairs)
    m_max = max(len(p[1]) for p in pairs)
    source = np.full((b, n_max), PAD_ID, dtype=np.int64)
    target = np.full((b, m_max), PAD_ID, dtype=np.int64)
    src_len = np.zeros(b, dtype=np.int64)
    trg_len = np.zeros(b, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        source[i, : len(s)] = s.ids
        target[i, : len(t)] = t.ids
        src_len[i] = len(s)
        trg_len[i] = len(t)
    return Batch(source, target, src_len, trg_len)


@dataclass
class IteratorState:
    """Resumable position of the shuffling iterator."""

    epoch: int
    seed: int
    position: int


def iterator_save(state: IteratorState) -> bytes:
    payload = {"version": 1, "epoch": state.epoch, "seed": state.seed, "position": state.position}
    return json.dumps(payload).encode("utf-8")


def iterator_restore(blob: bytes) -> IteratorState:
    try:
        payload = json.loads(blob.decode("utf-8"))
        if payload.get("version") != 1:
            raise FormatError(f"unsupported iterator state version: {payload.get('version')}")
        return IteratorState(
            epoch=int(payload["epoch"]),
            seed=int(payload["seed"]),
            position=int(payload["position"]),
        )
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot parse iterator state: {exc}") from exc


def filter_pairs(
    pairs: Sequence[tuple[EncodedSentence, EncodedSentence]],
    max_length: int,
) -> list[tuple[EncodedSentence, EncodedSentence]]:
    """Drop pairs that are empty or longer than ``max_length`` tokens per side.

    The target's trailing EOS does not count against the limit.
    """
    kept = []
    for s, t in pairs:
        if len(s) == 0 or len(t) <= 1:
            continue
        if len(s) > max_length or len(t) - 1 > max_length:
            continue
        kept.append((s, t))
    return kept


class ShufflingBatchIterator:
    """Deterministic bucketed batch stream with a word budget on target tokens.

    Pairs are bucketed by (ceil(n/width), ceil(m/width)); every epoch shuffles
    the pairs inside each bucket and the bucket visit order using a generator
    derived purely from (seed, epoch), so any position in the stream can be
    reproduced from the :class:`IteratorState` alone.
    """

    def __init__(
        self,
        pairs: Sequence[tuple[EncodedSentence, EncodedSentence]],
        word_budget: int,
        bucket_width: int = 8,
        max_length: int = 100,
        seed: int = 0,
        state: IteratorState | None = None,
    ):
        self.pairs = filter_pairs(pairs, max_length)
        if not self.pairs:
            raise InputError("no sentence pairs left after length filtering")
        for idx, (_, t) in enumerate(self.pairs):
            if len(t) > word_budget:
                raise ConfigurationError(
                    f"word budget {word_budget} is smaller than sentence {idx} "
                    f"with {len(t)} target tokens"
                )
        self.word_budget = word_budget
        self.bucket_width = bucket_width
        if state is not None and state.seed != seed:
            seed = state.seed
        self.state = state or IteratorState(epoch=0, seed=seed, position=0)
        self._epoch_plan: list[list[int]] | None = None
        self._plan_epoch = -1

    def _buckets(self) -> dict[tuple[int, int], list[int]]:
        w = self.bucket_width
        buckets: dict[tuple[int, int], list[int]] = {}
        for idx, (s, t) in enumerate(self.pairs):
            key = (math.ceil(len(s) / w), math.ceil(len(t) / w))
            buckets.setdefault(key, []).append(idx)
        return buckets

    def _plan(self, epoch: int) -> list[list[int]]:
        """Batch composition for one epoch as lists of pair indices."""
        if self._plan_epoch == epoch and self._epoch_plan is not None:
            return self._epoch_plan
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.state.seed, spawn_key=(epoch,))
        )
        buckets = self._buckets()
        ordered_keys = sorted(buckets)
        per_bucket_batches: list[list[list[int]]] = []
        for key in ordered_keys:
            indices = np.array(buckets[key], dtype=np.int64)
            rng.shuffle(indices)
            batches: list[list[int]] = []
            current: list[int] = []
            current_words = 0
            for idx in indices.tolist():
                words = len(self.pairs[idx][1])
                if current and current_words + words > self.word_budget:
                    batches.append(current)
                    current, current_words = [], 0
                current.append(idx)
                current_words += words
            if current:
                batches.append(current)
            per_bucket_batches.append(batches)
        visit = np.arange(len(ordered_keys))
        rng.shuffle(visit)
        plan = [batch for k in visit.tolist() for batch in per_bucket_batches[k]]
        self._epoch_plan = plan
        self._plan_epoch = epoch
        return plan

    def batches_in_epoch(self, epoch: int) -> int:
        return len(self._plan(epoch))

    def next_batch(self) -> Batch:
        plan = self._plan(self.state.epoch)
        if self.state.position >= len(plan):
            self.state.epoch += 1
            self.state.position = 0
            plan = self._plan(self.state.epoch)
        indices = plan[self.state.position]
        self.state.position += 1
        return make_batch([self.pairs[i] for i in indices])

    def at_epoch_end(self) -> bool:
        return self.state.position >= len(self._plan(self.state.epoch))

    def save(self) -> bytes:
        return iterator_save(self.state)

    def restore(self, blob: bytes) -> None:
        self.state = iterator_restore(blob)
        self._plan_epoch = -1
        self._epoch_plan = None
