"""This file contains the workflow of the speech recognizer commands

The command and its options come from the command line; the model and
training settings come from the flat config file. Each command returns a
ResultResponse or, on any failure, an ErrorResponse carrying the error category.
"""
import logging
import os
import time
import traceback
from dataclasses import asdict
from typing import Any, Dict, Optional

# Import response wrappers:
# - use ResultResponse to return computation results
# - use ErrorResponse to return meaningful error messages to the caller
from libs.return_objects import ErrorResponse, Response, ResultResponse
from libs.utilities import configure_logging, export_to_json, load_flat_config, reformat_for_json, route_config

from libs.speech_mamba.AudioFeatures import FbankConfig
from libs.speech_mamba.Benchmarks import run_benchmarks
from libs.speech_mamba.Checkpoints import assign_state, load_checkpoint
from libs.speech_mamba.DataProcessor import (
    REFERENCE_SUBSETS,
    LongContextSpec,
    SpeechData,
    SyntheticToneCorpus,
    Vocabulary,
    build_long_context,
    compare_with_reference,
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
from libs.speech_mamba.Decoding import (
    DecodeConfig,
    beam_search_hypotheses,
    ctc_greedy_batch,
    greedy_attention_decode,
)
from libs.speech_mamba.Errors import ConfigError, ManifestError, UsageError
from libs.speech_mamba.GradientSuite import run_gradient_suite, summarize
from libs.speech_mamba.Metrics import word_error_rate
from libs.speech_mamba.SpeechMambaNetworks import ModelConfig, build_variant
from libs.speech_mamba.Trainer import TrainConfig, Trainer

CONFIG_TARGETS = {"model": ModelConfig, "train": TrainConfig, "decode": DecodeConfig, "fbank": FbankConfig}
DECODE_MODES = ("beam", "greedy_ctc", "greedy_attention")

logger = logging.getLogger(__name__ + ".py")


def _configs(options: Dict[str, Any]) -> Dict[str, dict]:
    flat = load_flat_config(options.get("config"), options.get("set") or (), options.get("seed"))
    routed = route_config(flat, CONFIG_TARGETS)
    if "lm" in routed["decode"]:
        raise ConfigError("the language model hook cannot be set from the config file")
    return routed


def train(options: Dict[str, Any]) -> dict:
    routed = _configs(options)
    fbank_cfg = FbankConfig(**routed["fbank"])
    output_dir = options.get("output_dir") or routed["train"].get("output_dir", "model")
    routed["train"]["output_dir"] = output_dir

    if options.get("synthetic"):
        corpus = SyntheticToneCorpus(num_utterances=int(options["synthetic"]), seed=int(routed["train"].get("seed", 0)))
        data = corpus.speech_data(fbank_cfg)
        vocab = corpus.vocab
    else:
        if not options.get("train_manifest") or not options.get("dev_manifest"):
            raise UsageError("train needs --train-manifest and --dev-manifest, or --synthetic N")
        train_records = read_manifest(options["train_manifest"])
        dev_records = read_manifest(options["dev_manifest"])
        if options.get("vocab"):
            vocab = Vocabulary.load(options["vocab"])
        else:
            vocab = Vocabulary.from_transcripts([r.text for r in train_records])
        features = extract_features(
            train_records + dev_records, fbank_cfg, options.get("feature_cache"), int(options.get("workers") or 4)
        )
        data = SpeechData(features, vocab, train_records, dev_records)
    logger.info("Data loaded successfully.")

    model_kwargs = dict(routed["model"])
    if model_kwargs.setdefault("vocab_size", vocab.vocab_size) != vocab.vocab_size:
        raise ConfigError(f"vocab_size {model_kwargs['vocab_size']} does not match the vocabulary ({vocab.vocab_size})")
    if model_kwargs.setdefault("n_mels", fbank_cfg.n_mels) != fbank_cfg.n_mels:
        raise ConfigError("model n_mels differs from the filterbank n_mels")
    model = build_variant(ModelConfig(**model_kwargs))
    trainer = Trainer(data, model, TrainConfig(**routed["train"]))
    logger.info("Parameters loaded successfully.")

    summary = trainer.train()
    vocab_path = os.path.join(output_dir, "vocab.txt")
    vocab.save(vocab_path)
    summary["vocab"] = vocab_path
    export_to_json(reformat_for_json(summary), os.path.join(output_dir, "response_training.json"))
    logger.info("Training of the speech recognizer has ended")
    return summary


def decode(options: Dict[str, Any]) -> dict:
    mode = options.get("mode") or "beam"
    if mode not in DECODE_MODES:
        raise UsageError(f"unknown decode mode {mode}, choose from {DECODE_MODES}")
    routed = _configs(options)
    state, meta = load_checkpoint(options["checkpoint"])
    if "config" not in meta:
        raise ConfigError(f"checkpoint {options['checkpoint']} carries no model config")
    model = build_variant(ModelConfig(**meta["config"]))
    assign_state(model, state)
    vocab = Vocabulary.load(options["vocab"])
    decode_cfg = DecodeConfig(**routed["decode"])
    fbank_cfg = FbankConfig(**{**routed["fbank"], "n_mels": model.config.n_mels})
    records = read_manifest(options["manifest"])
    features = extract_features(records, fbank_cfg, options.get("feature_cache"), int(options.get("workers") or 4))

    hypotheses, nbest = {}, {}
    for record in records:
        feats = features[record.id]
        if mode == "greedy_ctc":
            tokens = ctc_greedy_batch(model, feats[None], [len(feats)])[0]
        elif mode == "greedy_attention":
            tokens = greedy_attention_decode(model, feats, max_len=decode_cfg.max_len, max_len_ratio=decode_cfg.max_len_ratio)
        else:
            finished = beam_search_hypotheses(model, feats, decode_cfg)
            tokens = finished[0].symbols
            nbest[record.id] = [
                {**h.to_dict(), "text": vocab.detokenize(h.symbols)} for h in finished[: decode_cfg.nbest]
            ]
        hypotheses[record.id] = vocab.detokenize(tokens)

    out_path = options.get("out") or "hypotheses.tsv"
    write_transcripts(out_path, hypotheses)
    result = {"hypotheses": out_path, "utterances": len(records), "mode": mode}
    if options.get("nbest_json") and nbest:
        export_to_json(nbest, options["nbest_json"])
        result["nbest"] = options["nbest_json"]
    if records and all(r.text.strip() for r in records):
        references = [normalize_text(r.text) for r in records]
        result["wer"] = word_error_rate(references, [hypotheses[r.id] for r in records]).to_dict()
    logger.info("Decoding of %d utterances has ended", len(records))
    return result


def score(options: Dict[str, Any]) -> dict:
    refs = read_transcripts(options["ref"])
    hyps = read_transcripts(options["hyp"])
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        raise ManifestError(f"reference/hypothesis ids differ: missing {missing[:5]}, unexpected {extra[:5]}")
    ids = list(refs)
    result = word_error_rate([refs[i] for i in ids], [hyps[i] for i in ids]).to_dict()
    result["summary"] = f"WER {100.0 * result['wer']:.2f}"
    logger.info(result["summary"])
    return result


def build_longcontext(options: Dict[str, Any]) -> dict:
    if options.get("preset"):
        if options.get("min_s") is not None or options.get("max_s") is not None:
            raise UsageError("give either --preset or --min-s/--max-s")
        spec = LongContextSpec.preset(options["preset"])
    elif options.get("min_s") is not None and options.get("max_s") is not None:
        spec = LongContextSpec(float(options["min_s"]), float(options["max_s"]))
    else:
        raise UsageError("build-longcontext needs --preset or both --min-s and --max-s")
    records = read_manifest(options["manifest"])
    dry_run = bool(options.get("dry_run"))
    output_dir = options.get("output_dir")
    merged = build_long_context(records, spec, output_dir, dry_run=dry_run)
    result = {"spec": asdict(spec), "stats": long_context_stats(merged), "dry_run": dry_run}
    if not dry_run:
        out_path = options.get("out") or os.path.join(output_dir or ".", "manifest.jsonl")
        write_manifest(out_path, merged)
        result["manifest"] = out_path
    reference = options.get("reference")
    if reference:
        if reference not in REFERENCE_SUBSETS:
            raise UsageError(f"unknown reference subset {reference}, choose from {sorted(REFERENCE_SUBSETS)}")
        trace = plan_long_context(records, spec).trace
        result["comparison"] = compare_with_reference(result["stats"], REFERENCE_SUBSETS[reference], trace=trace)
    return result


def gradcheck(options: Dict[str, Any]) -> dict:
    seed = options.get("seed")
    coords = options.get("coords")
    coords = 3 if coords is None else int(coords)
    if coords < 0:
        raise UsageError(f"--coords must be >= 0, got {coords}")
    # 0 checks every coordinate of the composite parameters
    results = run_gradient_suite(seed=0 if seed is None else int(seed), coords_per_param=coords or None)
    return summarize(results)


def bench_scan(options: Dict[str, Any]) -> dict:
    lengths = tuple(int(t) for t in (options.get("lengths") or (4096, 8192)))
    seed = options.get("seed")
    return run_benchmarks(lengths, repeats=int(options.get("repeats") or 5), seed=0 if seed is None else int(seed))


def prepare_manifest(options: Dict[str, Any]) -> dict:
    records = prepare_librispeech_manifest(options["root"])
    out_path = options.get("out") or "manifest.jsonl"
    write_manifest(out_path, records)
    return {"manifest": out_path, "stats": long_context_stats(records)}


COMMANDS = {
    "train": train,
    "decode": decode,
    "score": score,
    "build-longcontext": build_longcontext,
    "gradcheck": gradcheck,
    "bench-scan": bench_scan,
    "prepare-manifest": prepare_manifest,
}


def run(command: str, options: Optional[Dict[str, Any]] = None, log_path: str = "log.log") -> Response:
    """
    Default entry point of the toolkit.

    Parameters:
        command (str): one of COMMANDS
        options (Optional[Dict[str, Any]]): the parsed command line options

    Returns:
        response: (ResultResponse | ErrorResponse): the command result or the categorized error
    """
    logger = configure_logging(log_path)
    options = options or {}
    tic = time.perf_counter()
    try:
        if command not in COMMANDS:
            raise UsageError(f"unknown command {command}, choose from {sorted(COMMANDS)}")
        logger.info("Running %s", command)
        result = reformat_for_json(COMMANDS[command](options))
        if command == "gradcheck" and not result["passed"]:
            failed = [c["name"] for c in result["checks"] if not c["passed"]]
            return ErrorResponse(code="gradcheck", detail=f"gradient checks above threshold: {failed}")
        logger.info("Finished %s", command)
        return ResultResponse(result=result, metadata={"command": command, "seconds": time.perf_counter() - tic})
    except Exception as e:
        logger.error(
            "An error occured while processing. Error reads: \n %s",
            traceback.format_exc(),
        )
        return ErrorResponse.from_exception(e)
