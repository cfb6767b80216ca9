"""
This file handles the input data: manifests, tokenization, the long-context
subset builder, batching, and the synthetic tone corpus used for smoke tests.
"""
import glob
import json
import logging
import os
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import groupby
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from libs.speech_mamba.AudioFeatures import (
    TARGET_RATE,
    FbankConfig,
    audio_duration,
    fbank,
    load_features,
    read_audio,
    read_feature_cache,
    resample,
    write_audio,
    write_feature_cache,
)
from libs.speech_mamba.Errors import (
    ConfigError,
    ManifestError,
    MissingFileError,
    VocabularyError,
)
from libs.speech_mamba.Objectives import DECODER_PAD
from libs.speech_mamba.SpeechMambaNetworks import BOS_ID, EOS_ID, FIRST_SYMBOL_ID

logger = logging.getLogger(__name__ + ".py")

# Published figures of the 45-60 s subsets: utterances, total and average seconds.
REFERENCE_SUBSETS = {
    "dev-clean": {"count": 344, "total_s": 16960.17, "average_s": 49.30},
    "dev-other": {"count": 331, "total_s": 16253.57, "average_s": 49.10},
    "test-clean": {"count": 342, "total_s": 16942.85, "average_s": 49.54},
    "test-other": {"count": 343, "total_s": 16860.42, "average_s": 49.16},
}


@dataclass
class UtteranceRecord:
    id: str
    audio_path: str
    duration_s: float
    speaker: str
    order_key: str
    text: str

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ManifestError(f"utterance {self.id} has non-positive duration {self.duration_s}")


_RECORD_FIELDS = {f.name for f in fields(UtteranceRecord)}


def iter_manifest(path) -> Iterator[UtteranceRecord]:
    """Yields the records of a JSON-lines manifest; duplicate ids are rejected."""
    if not os.path.isfile(path):
        raise MissingFileError(f"manifest {path} does not exist")
    seen = set()
    with open(path, "r", encoding="utf-8") as file:
        for line_number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as err:
                raise ManifestError(f"{path}:{line_number}: malformed JSON ({err.msg})") from err
            if not isinstance(entry, dict) or set(entry) != _RECORD_FIELDS:
                raise ManifestError(
                    f"{path}:{line_number}: expected exactly the fields {sorted(_RECORD_FIELDS)}"
                )
            try:
                record = UtteranceRecord(**entry)
            except ManifestError as err:
                raise ManifestError(f"{path}:{line_number}: {err}") from err
            if record.id in seen:
                raise ManifestError(f"{path}:{line_number}: duplicate utterance id {record.id}")
            seen.add(record.id)
            yield record


def read_manifest(path) -> List[UtteranceRecord]:
    return list(iter_manifest(path))


def write_manifest(path, records: Sequence[UtteranceRecord]):
    """Writes one JSON object per line, in the given order."""
    with open(path, "w", encoding="utf-8") as file:
        for record in records:
            file.write(json.dumps(asdict(record), ensure_ascii=False) + "\n")
    logger.info("wrote %d records to %s", len(records), path)


def read_transcripts(path) -> Dict[str, str]:
    """Reads `id<TAB>text` lines (reference or hypothesis tables)."""
    if not os.path.isfile(path):
        raise MissingFileError(f"transcript table {path} does not exist")
    table = {}
    with open(path, "r", encoding="utf-8") as file:
        for line_number, line in enumerate(file, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            utt_id, _, text = line.partition("\t")
            if utt_id in table:
                raise ManifestError(f"{path}:{line_number}: duplicate utterance id {utt_id}")
            table[utt_id] = text
    return table


def write_transcripts(path, table: Dict[str, str]):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        for utt_id, text in table.items():
            file.write(f"{utt_id}\t{text}\n")


_PUNCTUATION = "".join(c for c in string.punctuation if c != "'")


def normalize_text(text: str) -> str:
    """Uppercase, punctuation removed except apostrophes, single spaces."""
    text = text.upper().translate(str.maketrans("", "", _PUNCTUATION))
    return " ".join(text.split())


class Vocabulary:
    """Symbol table; symbol ids start at 3 after blank, BOS and EOS.

    Tokenization is greedy longest match, so a subword table loaded from file
    works the same way as the default character table.
    """

    SPACE = "<space>"

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise VocabularyError("vocabulary symbols must be unique")
        if not symbols or any(s == "" for s in symbols):
            raise VocabularyError("vocabulary needs at least one non-empty symbol")
        self.symbols = symbols
        self.id_of = {s: FIRST_SYMBOL_ID + i for i, s in enumerate(symbols)}
        self.longest = max(len(s) for s in symbols)

    @classmethod
    def from_transcripts(cls, texts: Sequence[str]) -> "Vocabulary":
        """Character table of the normalized transcripts."""
        chars = sorted({c for text in texts for c in normalize_text(text)})
        return cls(chars)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        """Reads `token id` lines; ids must run contiguously from 3."""
        if not os.path.isfile(path):
            raise MissingFileError(f"vocabulary {path} does not exist")
        entries = []
        with open(path, "r", encoding="utf-8") as file:
            for line_number, line in enumerate(file, start=1):
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != 2 or not parts[1].isdigit():
                    raise VocabularyError(f"{path}:{line_number}: expected 'token id'")
                entries.append((int(parts[1]), " " if parts[0] == cls.SPACE else parts[0]))
        entries.sort()
        if [i for i, _ in entries] != list(range(FIRST_SYMBOL_ID, FIRST_SYMBOL_ID + len(entries))):
            raise VocabularyError(f"{path}: symbol ids must run contiguously from {FIRST_SYMBOL_ID}")
        return cls([s for _, s in entries])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as file:
            for symbol in self.symbols:
                token = self.SPACE if symbol == " " else symbol
                file.write(f"{token} {self.id_of[symbol]}\n")

    @property
    def vocab_size(self) -> int:
        """Number of ids 1..V seen by the decoder (BOS, EOS and symbols)."""
        return FIRST_SYMBOL_ID - 1 + len(self.symbols)

    def tokenize(self, text: str) -> List[int]:
        text = normalize_text(text)
        ids, position = [], 0
        while position < len(text):
            for width in range(min(self.longest, len(text) - position), 0, -1):
                piece = text[position : position + width]
                if piece in self.id_of:
                    ids.append(self.id_of[piece])
                    position += width
                    break
            else:
                raise VocabularyError(f"symbol {text[position]!r} is not in the vocabulary")
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        pieces = []
        for token in ids:
            token = int(token)
            if token < FIRST_SYMBOL_ID:
                continue
            index = token - FIRST_SYMBOL_ID
            if index >= len(self.symbols):
                raise VocabularyError(f"token id {token} is outside the vocabulary")
            pieces.append(self.symbols[index])
        return "".join(pieces)


@dataclass(frozen=True)
class LongContextSpec:
    """Duration window (min_s, max_s) of merged long-context utterances."""

    min_s: float
    max_s: float
    name: str = ""

    PRESETS = {"L": (45.0, 60.0), "70": (55.0, 70.0), "80": (65.0, 80.0), "90": (75.0, 90.0), "100": (85.0, 100.0)}

    def __post_init__(self):
        if not 0 < self.min_s < self.max_s:
            raise ConfigError(f"need 0 < min_s < max_s, got {self.min_s} / {self.max_s}")

    @classmethod
    def preset(cls, name: str) -> "LongContextSpec":
        if name not in cls.PRESETS:
            raise ConfigError(f"unknown long-context preset {name}, choose from {sorted(cls.PRESETS)}")
        low, high = cls.PRESETS[name]
        return cls(low, high, name)


@dataclass
class PackingPlan:
    """Accepted packs of consecutive same-speaker records and the decision trace."""

    packs: List[List[UtteranceRecord]] = field(default_factory=list)
    trace: List[dict] = field(default_factory=list)


def plan_long_context(records: Sequence[UtteranceRecord], spec: LongContextSpec) -> PackingPlan:
    """Greedy sequential packing per speaker.

    Records are accumulated in (speaker, order_key) order. The moment a pack
    exceeds min_s it is closed: kept when shorter than max_s, discarded
    otherwise. A leftover pack at or below min_s is dropped.
    """
    plan = PackingPlan()
    ordered = sorted(records, key=lambda r: (r.speaker, r.order_key))
    for speaker, group in groupby(ordered, key=lambda r: r.speaker):
        pack, total = [], 0.0
        for record in group:
            pack.append(record)
            total += record.duration_s
            if total > spec.min_s:
                decision = "kept" if total < spec.max_s else "too_long"
                if decision == "kept":
                    plan.packs.append(pack)
                plan.trace.append(
                    {"speaker": speaker, "ids": [r.id for r in pack], "duration_s": total, "decision": decision}
                )
                pack, total = [], 0.0
        if pack:
            plan.trace.append(
                {"speaker": speaker, "ids": [r.id for r in pack], "duration_s": total, "decision": "leftover"}
            )
    return plan


def build_long_context(
    records: Sequence[UtteranceRecord],
    spec: LongContextSpec,
    output_dir: Optional[str] = None,
    dry_run: bool = False,
) -> List[UtteranceRecord]:
    """Merges consecutive same-speaker utterances into records inside the (min_s, max_s) window.

    With dry_run (or no output_dir) no audio is written and the merged
    audio_path lists the constituent paths joined by '+'.
    """
    plan = plan_long_context(records, spec)
    merged = []
    if output_dir and not dry_run:
        os.makedirs(output_dir, exist_ok=True)
    for index, pack in enumerate(plan.packs):
        first = pack[0]
        utt_id = f"{first.speaker}-long-{index:05d}"
        duration = sum(r.duration_s for r in pack)
        audio_path = "+".join(r.audio_path for r in pack)
        if output_dir and not dry_run:
            pieces = []
            for record in pack:
                try:
                    samples, rate = read_audio(record.audio_path)
                except MissingFileError as err:
                    raise ManifestError(f"cannot merge {record.id}: {err}") from err
                pieces.append(resample(samples, rate, TARGET_RATE))
            audio_path = os.path.join(output_dir, utt_id + ".wav")
            audio = np.concatenate(pieces)
            write_audio(audio_path, audio, TARGET_RATE)
            duration = len(audio) / TARGET_RATE
        merged.append(
            UtteranceRecord(
                id=utt_id,
                audio_path=audio_path,
                duration_s=duration,
                speaker=first.speaker,
                order_key=first.order_key,
                text=" ".join(r.text for r in pack),
            )
        )
    logger.info(
        "long-context %s: %d merged utterances from %d records",
        spec.name or f"{spec.min_s}-{spec.max_s}s",
        len(merged),
        len(records),
    )
    return merged


def long_context_stats(records: Sequence[UtteranceRecord]) -> dict:
    """Count, total and average duration of a subset."""
    frame = pd.DataFrame([asdict(r) for r in records], columns=sorted(_RECORD_FIELDS))
    count = int(len(frame))
    total = float(frame["duration_s"].sum()) if count else 0.0
    return {"count": count, "total_s": total, "average_s": total / count if count else 0.0}


def compare_with_reference(stats: dict, reference: dict, tolerance: float = 0.03, trace=None) -> dict:
    """Relative deviation of each statistic; logs the packing trace when outside tolerance."""
    deviations = {
        key: (stats[key] - reference[key]) / reference[key] for key in ("count", "total_s", "average_s")
    }
    within = all(abs(value) <= tolerance for value in deviations.values())
    if not within:
        logger.warning("long-context subset deviates from the reference: %s", deviations)
        for entry in trace or []:
            logger.warning("packing trace: %s", entry)
    return {"deviations": deviations, "within_tolerance": within}


def prepare_librispeech_manifest(root) -> List[UtteranceRecord]:
    """Scans a LibriSpeech split (speaker/chapter/*.trans.txt + FLAC files)."""
    if not os.path.isdir(root):
        raise MissingFileError(f"LibriSpeech directory {root} does not exist")
    records = []
    for transcript in sorted(glob.glob(os.path.join(root, "*", "*", "*.trans.txt"))):
        folder = os.path.dirname(transcript)
        with open(transcript, "r", encoding="utf-8") as file:
            for line in file:
                if not line.strip():
                    continue
                utt_id, text = line.strip().split(" ", 1)
                speaker, chapter, index = utt_id.split("-")
                audio_path = os.path.join(folder, utt_id + ".flac")
                if not os.path.isfile(audio_path):
                    raise ManifestError(f"{transcript}: audio {audio_path} is missing")
                records.append(
                    UtteranceRecord(
                        id=utt_id,
                        audio_path=audio_path,
                        duration_s=audio_duration(audio_path),
                        speaker=speaker,
                        order_key=f"{int(chapter):08d}-{int(index):05d}",
                        text=text,
                    )
                )
    logger.info("found %d utterances under %s", len(records), root)
    return records


def dynamic_batches(
    records: Sequence[UtteranceRecord],
    max_batch_length: float = 500.0,
    batch_size: int = 32,
    seed: Optional[int] = None,
) -> List[List[UtteranceRecord]]:
    """Duration-sorted batches holding at most max_batch_length seconds and batch_size records.

    An utterance is never split; one longer than the budget forms its own
    batch. With a seed the batch order is shuffled.
    """
    if max_batch_length <= 0 or batch_size < 1:
        raise ConfigError("max_batch_length and batch_size must be positive")
    batches, current, total = [], [], 0.0
    for record in sorted(records, key=lambda r: (r.duration_s, r.id)):
        if current and (total + record.duration_s > max_batch_length or len(current) >= batch_size):
            batches.append(current)
            current, total = [], 0.0
        if record.duration_s > max_batch_length:
            logger.warning("utterance %s (%.1f s) exceeds the batch budget", record.id, record.duration_s)
        current.append(record)
        total += record.duration_s
    if current:
        batches.append(current)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


@dataclass
class AsrBatch:
    """Padded numpy batch.

    tokens_in is BOS + tokens padded with EOS, dec_targets holds decoder class
    indices (id - 1) of tokens + EOS padded with -1.
    """

    ids: List[str]
    features: np.ndarray
    feat_lens: np.ndarray
    tokens_in: np.ndarray
    dec_targets: np.ndarray
    ctc_targets: List[List[int]]


def collate(ids: Sequence[str], features: Sequence[np.ndarray], token_lists: Sequence[Sequence[int]]) -> AsrBatch:
    batch = len(ids)
    feat_lens = np.array([len(f) for f in features], dtype=np.int64)
    dim = features[0].shape[1]
    padded = np.zeros((batch, int(feat_lens.max()), dim))
    for b, feats in enumerate(features):
        padded[b, : len(feats)] = feats
    steps = max(len(t) for t in token_lists) + 1
    tokens_in = np.full((batch, steps), EOS_ID, dtype=np.int64)
    dec_targets = np.full((batch, steps), DECODER_PAD, dtype=np.int64)
    for b, tokens in enumerate(token_lists):
        tokens = list(tokens)
        tokens_in[b, : len(tokens) + 1] = [BOS_ID] + tokens
        dec_targets[b, : len(tokens) + 1] = np.array(tokens + [EOS_ID]) - 1
    return AsrBatch(
        ids=list(ids),
        features=padded,
        feat_lens=feat_lens,
        tokens_in=tokens_in,
        dec_targets=dec_targets,
        ctc_targets=[list(t) for t in token_lists],
    )


def _cached_features(record: UtteranceRecord, cfg: FbankConfig, cache_dir: Optional[str]) -> np.ndarray:
    if cache_dir is None:
        return load_features(record.audio_path, cfg)
    cache_path = os.path.join(cache_dir, record.id + ".fbank")
    if os.path.isfile(cache_path):
        return read_feature_cache(cache_path)
    features = load_features(record.audio_path, cfg)
    write_feature_cache(cache_path, features)
    return features


def extract_features(
    records: Sequence[UtteranceRecord],
    cfg: FbankConfig = FbankConfig(),
    cache_dir: Optional[str] = None,
    workers: int = 4,
) -> Dict[str, np.ndarray]:
    """Per-utterance fbank in a thread pool, optionally through the binary cache."""
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(
            tqdm(
                pool.map(lambda r: _cached_features(r, cfg, cache_dir), records),
                total=len(records),
                desc="fbank",
                disable=len(records) < 50,
            )
        )
    return {record.id: feats for record, feats in zip(records, results)}


class SpeechData:
    """
    Class holding features, transcripts and the vocabulary of the train and dev sets.
    It supplies the padded batches consumed by the Trainer.
    """

    def __init__(
        self,
        features: Dict[str, np.ndarray],
        vocab: Vocabulary,
        train_records: Sequence[UtteranceRecord],
        dev_records: Sequence[UtteranceRecord] = (),
    ):
        self.features = features
        self.vocab = vocab
        self.train_records = list(train_records)
        self.dev_records = list(dev_records)
        missing = [r.id for r in self.train_records + self.dev_records if r.id not in features]
        if missing:
            raise ManifestError(f"no features for utterances {missing[:5]}")
        self.tokens = {r.id: vocab.tokenize(r.text) for r in self.train_records + self.dev_records}

    def _to_batch(self, records: Sequence[UtteranceRecord]) -> AsrBatch:
        ids = [r.id for r in records]
        return collate(ids, [self.features[i] for i in ids], [self.tokens[i] for i in ids])

    def get_train_batches(self, max_batch_length: float, batch_size: int, seed: Optional[int] = None) -> List[AsrBatch]:
        """Dynamic batches of the training set; shuffled in batch order when seed is given."""
        return [
            self._to_batch(group)
            for group in dynamic_batches(self.train_records, max_batch_length, batch_size, seed)
        ]

    def get_dev_batches(self, max_batch_length: float, batch_size: int) -> List[AsrBatch]:
        return [self._to_batch(group) for group in dynamic_batches(self.dev_records, max_batch_length, batch_size)]


class SyntheticToneCorpus:
    """Tone-pattern audio paired with token strings.

    Every symbol of the alphabet (space included) is a fixed-frequency tone of
    symbol_s seconds followed by gap_s seconds of silence.
    """

    def __init__(
        self,
        num_utterances: int = 20,
        alphabet: str = "ABCDE",
        min_symbols: int = 2,
        max_symbols: int = 5,
        symbol_s: float = 0.16,
        gap_s: float = 0.04,
        seed: int = 0,
        sample_rate: int = TARGET_RATE,
    ):
        if min_symbols < 1 or max_symbols < min_symbols:
            raise ConfigError("need 1 <= min_symbols <= max_symbols")
        self.alphabet = alphabet
        self.symbol_s = symbol_s
        self.gap_s = gap_s
        self.sample_rate = sample_rate
        self.vocab = Vocabulary(sorted(alphabet) + [" "])
        rng = np.random.default_rng(seed)
        symbols = list(alphabet)
        self.texts = []
        for _ in range(num_utterances):
            length = int(rng.integers(min_symbols, max_symbols + 1))
            chars = [symbols[int(i)] for i in rng.integers(0, len(symbols), size=length)]
            if length >= 3:
                chars[int(rng.integers(1, length - 1))] = " "
            self.texts.append("".join(chars))
        self.ids = [f"tone-{i:04d}" for i in range(num_utterances)]
        table = sorted(alphabet) + [" "]
        self.frequencies = {s: 300.0 + 350.0 * i for i, s in enumerate(table)}

    def waveform(self, text: str) -> np.ndarray:
        tone = np.arange(int(self.symbol_s * self.sample_rate)) / self.sample_rate
        gap = np.zeros(int(self.gap_s * self.sample_rate))
        pieces = [gap]
        for symbol in text:
            pieces.append(0.5 * np.sin(2.0 * np.pi * self.frequencies[symbol] * tone))
            pieces.append(gap)
        return np.concatenate(pieces)

    def records(self, audio_dir: str = "") -> List[UtteranceRecord]:
        return [
            UtteranceRecord(
                id=utt_id,
                audio_path=os.path.join(audio_dir, utt_id + ".wav"),
                duration_s=len(self.waveform(text)) / self.sample_rate,
                speaker="tone",
                order_key=utt_id,
                text=text,
            )
            for utt_id, text in zip(self.ids, self.texts)
        ]

    def features(self, cfg: FbankConfig = FbankConfig()) -> Dict[str, np.ndarray]:
        return {utt_id: fbank(self.waveform(text), cfg) for utt_id, text in zip(self.ids, self.texts)}

    def write(self, out_dir: str) -> List[UtteranceRecord]:
        """Writes WAV files and manifest.jsonl to out_dir."""
        os.makedirs(out_dir, exist_ok=True)
        for utt_id, text in zip(self.ids, self.texts):
            write_audio(os.path.join(out_dir, utt_id + ".wav"), self.waveform(text), self.sample_rate)
        records = self.records(out_dir)
        write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
        return records

    def speech_data(self, cfg: FbankConfig = FbankConfig()) -> SpeechData:
        records = self.records()
        return SpeechData(self.features(cfg), self.vocab, records, records)
