"""Command-line entry point: ``nepasr {prepare,featurize,train,transcribe,evaluate}``.

Per-item failures are reported on stderr and processing continues; the exit
status is 0 only when no item failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, PipelineConfig, load_config
from .features import FeatureError, extract_features, load_features, save_features
from .ingest import ManifestError, WavFormatError, filter_numeric, load_wav, parse_manifest, save_wav, write_manifest
from .metrics import aggregate_cer, score
from .network import AcousticModel
from .preprocess import clip_silence
from .textcodec import build_vocab, encode, save_vocab
from .training import TrainingExample, filter_feasible, fit, split_dataset, transcribe_posteriors

log = logging.getLogger("nepasr")

FEATURE_SUFFIX = ".npfeat"


class UsageError(Exception):
    pass


def worker_count() -> int:
    raw = os.environ.get("NPASR_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NPASR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"NPASR_THREADS must be a positive integer, got {raw!r}")
    return n


def ordered_map(fn, items):
    """Apply `fn` concurrently, returning results in input order."""
    items = list(items)
    workers = min(worker_count(), max(len(items), 1))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def find_audio(audio_dir: Path, utterance_id: str) -> Path:
    """``<dir>/<id>.wav``, else the two-character shard layout ``<dir>/<id[:2]>/<id>.wav``."""
    flat = audio_dir / f"{utterance_id}.wav"
    if flat.exists():
        return flat
    sharded = audio_dir / utterance_id[:2] / f"{utterance_id}.wav"
    if sharded.exists():
        return sharded
    raise FileNotFoundError(f"no audio for {utterance_id} under {audio_dir}")


def feature_path(features_dir: Path, utterance_id: str) -> Path:
    return Path(features_dir) / f"{utterance_id}{FEATURE_SUFFIX}"


def _resolve(value, fallback, name):
    chosen = value if value is not None else (fallback or None)
    if chosen is None:
        raise UsageError(f"{name} not given on the command line or in the config [paths] section")
    return Path(chosen)


def cmd_prepare(args, config: PipelineConfig) -> int:
    manifest = _resolve(args.manifest, config.paths.manifest, "manifest")
    audio_dir = _resolve(args.audio_dir, config.paths.data_dir, "audio_dir")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = parse_manifest(manifest)
    kept = filter_numeric(entries)
    print(f"numeric filter kept {len(kept)} of {len(entries)} utterances")

    def work(entry):
        try:
            signal = load_wav(find_audio(audio_dir, entry.utterance_id))
            clipped = clip_silence(signal, config.clip)
            save_wav(clipped, out_dir / f"{entry.utterance_id}.wav")
            return len(signal), len(clipped), None
        except (OSError, WavFormatError) as exc:
            return 0, 0, str(exc)

    results = ordered_map(work, kept)
    written, failures, before, after = [], 0, 0, 0
    for entry, (n_in, n_out, error) in zip(kept, results):
        if error:
            failures += 1
            print(f"error: {entry.utterance_id}: {error}", file=sys.stderr)
            continue
        written.append(entry)
        before += n_in
        after += n_out
    write_manifest(written, out_dir / "manifest.tsv")
    ratio = after / before if before else 0.0
    print(f"retained duration ratio {ratio:.4f} over {len(written)} utterances")
    return 1 if failures else 0


def cmd_featurize(args, config: PipelineConfig) -> int:
    manifest = _resolve(args.manifest, config.paths.manifest, "manifest")
    audio_dir = _resolve(args.audio_dir, config.paths.data_dir, "audio_dir")
    out_dir = _resolve(args.out_dir, config.paths.features_dir, "out_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = parse_manifest(manifest)

    def work(entry):
        target = feature_path(out_dir, entry.utterance_id)
        if target.exists() and not args.force:
            return "cached", None
        try:
            signal = load_wav(find_audio(audio_dir, entry.utterance_id))
        except (OSError, WavFormatError) as exc:
            return "failed", str(exc)
        try:
            feats = extract_features(signal, config.mfcc)
        except FeatureError as exc:
            return "skipped", str(exc)
        save_features(feats, target)
        return "written", None

    results = ordered_map(work, entries)
    counts = {"written": 0, "cached": 0, "skipped": 0, "failed": 0}
    report = []
    for entry, (status, message) in zip(entries, results):
        counts[status] += 1
        if status == "skipped":
            log.warning("skipping %s: %s", entry.utterance_id, message)
            report.append(f"{entry.utterance_id}\t{message}\n")
        elif status == "failed":
            print(f"error: {entry.utterance_id}: {message}", file=sys.stderr)
    (out_dir / "skipped.tsv").write_text("".join(report), encoding="utf-8")
    print(" ".join(f"{k} {v}" for k, v in counts.items()))
    return 1 if counts["failed"] else 0


def _load_examples(entries, features_dir, vocab):
    examples, missing = [], []
    for e in entries:
        path = feature_path(features_dir, e.utterance_id)
        try:
            feats = load_features(path)
        except (OSError, FeatureError) as exc:
            missing.append((e, str(exc)))
            continue
        examples.append(TrainingExample(feats.frames, tuple(encode(e.transcription, vocab)),
                                        e.utterance_id, e.transcription))
    return examples, missing


def cmd_train(args, config: PipelineConfig) -> int:
    if args.max_epochs is not None and args.max_epochs < 1:
        raise UsageError("--max-epochs must be >= 1")
    config = config.override("train", seed=args.seed, max_epochs=args.max_epochs)
    features_dir = _resolve(args.features_dir, config.paths.features_dir, "features_dir")
    manifest = _resolve(args.manifest, config.paths.manifest, "manifest")
    out_dir = _resolve(args.out_dir, config.paths.checkpoint_dir, "out_dir")
    seed = config.train.seed

    entries = parse_manifest(manifest)
    train_entries, test_entries = split_dataset(entries, seed=seed, by_speaker=args.by_speaker)
    vocab = build_vocab(e.transcription for e in train_entries)
    train, missing = _load_examples(train_entries, features_dir, vocab)
    test, missing_test = _load_examples(test_entries, features_dir, vocab)
    for e, message in missing + missing_test:
        log.warning("no features for %s: %s", e.utterance_id, message)

    net = config.network
    if train:
        net = config.override("network", input_dim=train[0].features.shape[1],
                              vocab_size=len(vocab)).network
    train = filter_feasible(train, net.stride)
    test = filter_feasible(test, net.stride)
    if not train:
        print("error: no feasible training examples", file=sys.stderr)
        return 1

    out_dir.mkdir(parents=True, exist_ok=True)
    save_vocab(vocab, out_dir / "vocab.txt")
    model = AcousticModel(net, seed=seed)
    beam = None if config.decode.greedy else config.decode.beam_width
    rows = fit(model, train, test, vocab, config.train, out_dir, beam_width=beam)
    epoch, train_loss, test_loss, test_cer = rows[-1]
    print(f"trained {epoch} epochs on {len(train)} utterances ({len(test)} held out): "
          f"train_loss {train_loss:.4f} test_loss {test_loss:.4f} test_cer {test_cer:.4f}")
    return 0


def _beam_width(args, config: PipelineConfig):
    if args.greedy or (args.greedy is None and config.decode.greedy):
        return None
    width = args.beam_width if args.beam_width is not None else config.decode.beam_width
    if width < 1:
        raise UsageError("--beam-width must be >= 1")
    return width


def cmd_transcribe(args, config: PipelineConfig) -> int:
    model, vocab = load_checkpoint(args.checkpoint)
    beam = _beam_width(args, config)
    paths = list(args.wavs)
    if args.stdin_list:
        paths += [line.strip() for line in sys.stdin if line.strip()]
    if not paths:
        raise UsageError("no audio given; pass WAV paths or --stdin-list")

    def work(path):
        try:
            signal = clip_silence(load_wav(path), config.clip)
            feats = extract_features(signal, config.mfcc)
            # same float32 rounding the feature cache applies during training
            frames = feats.frames.astype(np.float32).astype(np.float64)
            return transcribe_posteriors(model.forward(frames, mode="infer"), vocab, beam), None
        except (OSError, WavFormatError, FeatureError, ValueError) as exc:
            return None, str(exc)

    failures = 0
    for path, (text, error) in zip(paths, ordered_map(work, paths)):
        if error:
            failures += 1
            print(f"error: {path}: {error}", file=sys.stderr)
        else:
            print(f"{Path(path).stem}\t{text}")
    return 1 if failures else 0


def cmd_evaluate(args, config: PipelineConfig) -> int:
    model, vocab = load_checkpoint(args.checkpoint)
    beam = _beam_width(args, config)
    manifest = _resolve(args.manifest, config.paths.manifest, "manifest")
    features_dir = _resolve(args.features_dir, config.paths.features_dir, "features_dir")
    entries = parse_manifest(manifest)

    def work(entry):
        try:
            feats = load_features(feature_path(features_dir, entry.utterance_id))
        except (OSError, FeatureError) as exc:
            return None, str(exc)
        posteriors = model.forward(feats.frames, mode="infer")
        return score(entry.transcription, transcribe_posteriors(posteriors, vocab, beam)), None

    lines = ["utterance_id\treference\thypothesis\tedits\tcer\terror\n"]
    results, failures = [], 0
    for entry, (result, error) in zip(entries, ordered_map(work, entries)):
        if error:
            failures += 1
            print(f"error: {entry.utterance_id}: {error}", file=sys.stderr)
            lines.append(f"{entry.utterance_id}\t{entry.transcription}\t\t\t\t{error}\n")
            continue
        results.append(result)
        lines.append(f"{entry.utterance_id}\t{result.reference}\t{result.hypothesis}\t"
                     f"{result.edits}\t{result.cer!r}\t\n")
    Path(args.report).write_text("".join(lines), encoding="utf-8")
    if results:
        print(f"CER {aggregate_cer(results):.6f} over {len(results)} utterances")
    else:
        print("CER undefined: no utterance could be scored")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nepasr", description="Character-level Nepali speech recognition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="drop numeric transcriptions and clip silent edges")
    p.add_argument("manifest", nargs="?")
    p.add_argument("audio_dir", nargs="?")
    p.add_argument("out_dir")
    p.add_argument("--window-length", type=int, help="clipping window in samples (default 500)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("featurize", help="compute MFCC feature caches")
    p.add_argument("manifest", nargs="?")
    p.add_argument("audio_dir", nargs="?")
    p.add_argument("out_dir", nargs="?")
    p.add_argument("--force", action="store_true", help="rewrite existing caches")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the acoustic model")
    p.add_argument("features_dir", nargs="?")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--out-dir", help="checkpoint directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--by-speaker", action="store_true", help="keep each speaker on one side of the split")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe", help="transcribe WAV files to standard output")
    p.add_argument("checkpoint")
    p.add_argument("wavs", nargs="*")
    p.add_argument("--stdin-list", action="store_true", help="also read WAV paths from stdin, one per line")
    _decode_flags(p)
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("evaluate", help="score a checkpoint against a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest", nargs="?")
    p.add_argument("features_dir", nargs="?")
    p.add_argument("--report", default="evaluation.tsv", help="per-utterance TSV (default evaluation.tsv)")
    _decode_flags(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _decode_flags(p):
    p.add_argument("--beam-width", type=int, help="prefix beam width (default 50)")
    p.add_argument("--greedy", action="store_true", default=None, help="best-path decoding instead of beam search")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if getattr(args, "window_length", None) is not None:
            config = config.override("clip", window_length=args.window_length)
        return args.func(args, config)
    except (UsageError, ConfigError, ManifestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
