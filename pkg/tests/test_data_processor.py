import json
import logging
import os

import numpy as np
import pytest
import soundfile as sf

from libs.speech_mamba.AudioFeatures import FbankConfig, audio_duration, write_audio
from libs.speech_mamba.DataProcessor import (
    REFERENCE_SUBSETS,
    LongContextSpec,
    SpeechData,
    SyntheticToneCorpus,
    UtteranceRecord,
    Vocabulary,
    build_long_context,
    collate,
    compare_with_reference,
    dynamic_batches,
    extract_features,
    long_context_stats,
    normalize_text,
    plan_long_context,
    prepare_librispeech_manifest,
    read_manifest,
    read_transcripts,
    write_manifest,
    write_transcripts,
)
from libs.speech_mamba.Errors import ConfigError, ManifestError, MissingFileError, VocabularyError
from libs.speech_mamba.Objectives import DECODER_PAD


def record(utt_id, duration, speaker="s1", order_key=None, text="A B", audio_path=None):
    return UtteranceRecord(
        id=utt_id,
        audio_path=audio_path or f"{utt_id}.flac",
        duration_s=duration,
        speaker=speaker,
        order_key=order_key or utt_id,
        text=text,
    )


@pytest.fixture
def toy_records():
    return [
        record("s1-01", 20.0),
        record("s1-02", 20.0),
        record("s1-03", 10.0),
        record("s1-04", 30.0),
        record("s1-05", 40.0),
        record("s2-01", 44.0, speaker="s2"),
        record("s2-02", 2.0, speaker="s2"),
        record("s2-03", 10.0, speaker="s2"),
    ]


class TestManifest:
    def test_round_trip(self, tmp_path, toy_records):
        path = str(tmp_path / "m.jsonl")
        write_manifest(path, toy_records)
        assert read_manifest(path) == toy_records

    def test_duplicate_id(self, tmp_path):
        path = str(tmp_path / "m.jsonl")
        write_manifest(path, [record("a", 1.0), record("a", 2.0)])
        with pytest.raises(ManifestError):
            read_manifest(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"id": "a", "duration_s": 1.0}) + "\n")
        with pytest.raises(ManifestError):
            read_manifest(str(path))

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(ManifestError):
            read_manifest(str(path))

    def test_non_positive_duration(self):
        with pytest.raises(ManifestError):
            record("a", 0.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            read_manifest(str(tmp_path / "nothing.jsonl"))

    def test_transcripts(self, tmp_path):
        path = str(tmp_path / "sub" / "hyp.tsv")
        write_transcripts(path, {"a": "HELLO WORLD", "b": ""})
        assert read_transcripts(path) == {"a": "HELLO WORLD", "b": ""}
        with open(path, "a") as file:
            file.write("a\tAGAIN\n")
        with pytest.raises(ManifestError):
            read_transcripts(path)


class TestVocabulary:
    def test_character_table(self):
        vocab = Vocabulary.from_transcripts(["hello, world", "it's"])
        assert vocab.symbols == sorted(set("HELLO WORLDIT'S"))
        assert vocab.vocab_size == 2 + len(vocab.symbols)
        ids = vocab.tokenize("Hello world")
        assert min(ids) >= 3
        assert vocab.detokenize(ids) == "HELLO WORLD"

    def test_normalize(self):
        assert normalize_text("  it's, a  test! ") == "IT'S A TEST"

    def test_longest_match(self):
        vocab = Vocabulary(["A", "AB", "B"])
        assert vocab.tokenize("ABB") == [4, 5]

    def test_round_trip_on_random_strings(self, rng):
        vocab = Vocabulary(["A", "B", "C", "D", "E", "'", " ", "AB", "BC", "CDE", "'S", "S", "E A"])
        letters = list("ABCDES'")
        longer = sorted(vocab.symbols, key=len, reverse=True)
        for _ in range(1000):
            words = [
                "".join(rng.choice(letters, size=int(rng.integers(1, 7))))
                for _ in range(int(rng.integers(1, 5)))
            ]
            text = " ".join(words)
            ids = vocab.tokenize(text)
            assert vocab.detokenize(ids) == text
            position = 0
            for token in ids:
                piece = vocab.symbols[token - 3]
                assert piece == next(s for s in longer if text.startswith(s, position))
                position += len(piece)

    def test_unknown_symbol(self):
        with pytest.raises(VocabularyError):
            Vocabulary(["A"]).tokenize("AZ")

    def test_detokenize_drops_specials(self):
        assert Vocabulary(["A", " "]).detokenize([1, 3, 4, 3, 2]) == "A A"

    def test_save_load(self, tmp_path):
        vocab = Vocabulary(["A", " ", "B"])
        path = str(tmp_path / "vocab.txt")
        vocab.save(path)
        assert "<space> 4" in open(path).read()
        assert Vocabulary.load(path).symbols == vocab.symbols

    def test_non_contiguous_ids(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("A 3\nB 5\n")
        with pytest.raises(VocabularyError):
            Vocabulary.load(str(path))

    def test_duplicate_symbols(self):
        with pytest.raises(VocabularyError):
            Vocabulary(["A", "A"])


class TestLongContext:
    def test_packing_decisions(self, toy_records):
        plan = plan_long_context(toy_records, LongContextSpec.preset("L"))
        decisions = [(entry["ids"], entry["decision"]) for entry in plan.trace]
        assert decisions == [
            (["s1-01", "s1-02", "s1-03"], "kept"),
            (["s1-04", "s1-05"], "too_long"),
            (["s2-01", "s2-02"], "kept"),
            (["s2-03"], "leftover"),
        ]

    def test_merged_durations_lie_in_window(self, toy_records):
        spec = LongContextSpec.preset("L")
        merged = build_long_context(toy_records, spec, dry_run=True)
        assert [r.duration_s for r in merged] == [50.0, 46.0]
        assert all(spec.min_s < r.duration_s < spec.max_s for r in merged)
        assert merged[0].audio_path == "s1-01.flac+s1-02.flac+s1-03.flac"
        assert merged[0].text == "A B A B A B"
        assert merged[1].id == "s2-long-00001"

    def test_order_key_decides_the_sequence(self):
        records = [record("b", 25.0, order_key="2"), record("a", 25.0, order_key="1")]
        merged = build_long_context(records, LongContextSpec(45.0, 60.0), dry_run=True)
        assert merged[0].audio_path == "a.flac+b.flac"

    def test_presets(self):
        assert (LongContextSpec.preset("90").min_s, LongContextSpec.preset("90").max_s) == (75.0, 90.0)
        with pytest.raises(ConfigError):
            LongContextSpec.preset("120")
        with pytest.raises(ConfigError):
            LongContextSpec(60.0, 45.0)

    def test_audio_is_concatenated(self, tmp_path, rng):
        records = []
        for index in range(3):
            path = str(tmp_path / f"u{index}.wav")
            write_audio(path, rng.uniform(-0.1, 0.1, size=3200), 16000)
            records.append(record(f"u{index}", 0.2, audio_path=path, order_key=str(index)))
        out_dir = str(tmp_path / "long")
        merged = build_long_context(records, LongContextSpec(0.25, 0.6), out_dir)
        assert len(merged) == 1
        assert audio_duration(merged[0].audio_path) == pytest.approx(0.4)
        assert merged[0].duration_s == pytest.approx(0.4)

    def test_missing_constituent_audio(self, tmp_path):
        records = [record("a", 25.0, audio_path=str(tmp_path / "a.wav")), record("b", 25.0)]
        with pytest.raises(ManifestError):
            build_long_context(records, LongContextSpec(45.0, 60.0), str(tmp_path / "out"))

    def test_stats_and_reference(self, toy_records, caplog):
        merged = build_long_context(toy_records, LongContextSpec.preset("L"), dry_run=True)
        stats = long_context_stats(merged)
        assert stats == {"count": 2, "total_s": 96.0, "average_s": 48.0}
        assert long_context_stats([]) == {"count": 0, "total_s": 0.0, "average_s": 0.0}
        trace = plan_long_context(toy_records, LongContextSpec.preset("L")).trace
        with caplog.at_level(logging.WARNING):
            result = compare_with_reference(stats, {"count": 2, "total_s": 100.0, "average_s": 50.0}, trace=trace)
        assert not result["within_tolerance"]
        assert result["deviations"]["count"] == 0.0
        assert "packing trace" in caplog.text
        assert compare_with_reference(stats, stats)["within_tolerance"]


class TestBatching:
    def test_budget_and_size(self):
        records = [record(f"u{i}", d) for i, d in enumerate([5.0, 1.0, 4.0, 3.0, 2.0, 12.0])]
        batches = dynamic_batches(records, max_batch_length=6.0, batch_size=2)
        durations = [[r.duration_s for r in batch] for batch in batches]
        assert durations == [[1.0, 2.0], [3.0], [4.0], [5.0], [12.0]]

    def test_shuffle_keeps_batches(self):
        records = [record(f"u{i}", float(i + 1)) for i in range(10)]
        plain = dynamic_batches(records, 5.0, 8)
        shuffled = dynamic_batches(records, 5.0, 8, seed=3)
        assert sorted(map(lambda b: [r.id for r in b], plain)) == sorted(map(lambda b: [r.id for r in b], shuffled))
        assert shuffled == dynamic_batches(records, 5.0, 8, seed=3)

    def test_invalid_budget(self):
        with pytest.raises(ConfigError):
            dynamic_batches([], 0.0, 4)

    def test_collate(self, rng):
        batch = collate(["a", "b"], [rng.normal(size=(4, 3)), rng.normal(size=(6, 3))], [[3, 4], [5]])
        assert batch.features.shape == (2, 6, 3)
        np.testing.assert_array_equal(batch.features[0, 4:], 0.0)
        np.testing.assert_array_equal(batch.feat_lens, [4, 6])
        np.testing.assert_array_equal(batch.tokens_in, [[1, 3, 4], [1, 5, 2]])
        np.testing.assert_array_equal(batch.dec_targets, [[2, 3, 1], [4, 1, DECODER_PAD]])
        assert batch.ctc_targets == [[3, 4], [5]]


class TestCorpora:
    def test_synthetic_corpus(self):
        corpus = SyntheticToneCorpus(num_utterances=6, seed=2)
        assert corpus.vocab.vocab_size == 8
        data = corpus.speech_data(FbankConfig(n_mels=8))
        batches = data.get_train_batches(100.0, 4, seed=0)
        assert sum(len(b.ids) for b in batches) == 6
        assert all(b.features.shape[-1] == 8 for b in batches)
        assert SyntheticToneCorpus(num_utterances=6, seed=2).texts == corpus.texts

    def test_speech_data_needs_features(self):
        with pytest.raises(ManifestError):
            SpeechData({}, Vocabulary(["A", " ", "B"]), [record("a", 1.0)])

    def test_feature_cache_is_reused(self, tmp_path):
        corpus = SyntheticToneCorpus(num_utterances=2)
        records = corpus.write(str(tmp_path / "audio"))
        cache = str(tmp_path / "cache")
        first = extract_features(records, FbankConfig(), cache, workers=2)
        assert (tmp_path / "cache" / "tone-0000.fbank").is_file()
        second = extract_features(records, FbankConfig(), cache, workers=2)
        for utt_id, feats in first.items():
            np.testing.assert_allclose(second[utt_id], feats, rtol=1e-6, atol=1e-5)
        assert read_manifest(str(tmp_path / "audio" / "manifest.jsonl")) == records

    def test_librispeech_layout(self, tmp_path):
        chapter = tmp_path / "19" / "198"
        chapter.mkdir(parents=True)
        (chapter / "19-198.trans.txt").write_text("19-198-0000 HELLO WORLD\n19-198-0001 AGAIN\n")
        for index in range(2):
            sf.write(str(chapter / f"19-198-000{index}.flac"), np.zeros(8000), 16000)
        records = prepare_librispeech_manifest(str(tmp_path))
        assert [r.id for r in records] == ["19-198-0000", "19-198-0001"]
        assert records[0].order_key == "00000198-00000"
        assert records[0].speaker == "19" and records[0].text == "HELLO WORLD"
        assert records[1].duration_s == pytest.approx(0.5)

    def test_librispeech_missing_audio(self, tmp_path):
        chapter = tmp_path / "19" / "198"
        chapter.mkdir(parents=True)
        (chapter / "19-198.trans.txt").write_text("19-198-0000 HELLO\n")
        with pytest.raises(ManifestError):
            prepare_librispeech_manifest(str(tmp_path))


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("LIBRISPEECH_DEV_CLEAN"), reason="LIBRISPEECH_DEV_CLEAN is not set")
def test_librispeech_dev_clean_long_context():
    records = prepare_librispeech_manifest(os.environ["LIBRISPEECH_DEV_CLEAN"])
    merged = build_long_context(records, LongContextSpec.preset("L"), dry_run=True)
    spec = LongContextSpec.preset("L")
    assert all(spec.min_s < r.duration_s < spec.max_s for r in merged)
    result = compare_with_reference(long_context_stats(merged), REFERENCE_SUBSETS["dev-clean"])
    assert result["within_tolerance"], result["deviations"]
