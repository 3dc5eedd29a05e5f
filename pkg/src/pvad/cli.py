"""Command-line interface: ``pvad <command> ...``.

Errors are reported as one JSON line on stderr, e.g.
``{"error": "LoadError", "field": "checksum", "message": "..."}``, with exit status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import datagen, model as M, quant, trainer
from .container import load_model, save_model
from .errors import ContractError, InputError, LoadError, PVADError
from .frontend import SAMPLE_RATE, AudioBuffer, compute_features, read_wav
from .quant import QuantizedBundle
from .stream import StreamSession

log = logging.getLogger("pvad")


def _float_bundle(bundle):
    return bundle.dequantized() if isinstance(bundle, QuantizedBundle) else bundle


def _eval_examples(corpus: datagen.Corpus, n: int, seed: int, speakers: tuple[int, int]):
    split = corpus.split("eval")
    if not split.utterances:
        split = corpus
    return datagen.make_examples(split, n, np.random.default_rng(seed), speakers)


def cmd_synth_data(args) -> int:
    corpus = datagen.synth_corpus(
        args.seed, args.speakers, args.utterances, args.mode, args.embedding_dim, args.eval_fraction
    )
    out = datagen.export_corpus(corpus, args.out_dir, args.mode, args.seed)
    print(json.dumps({"corpus": str(out), "speakers": len(corpus.speakers), "utterances": len(corpus.utterances)}))
    return 0


def cmd_train(args) -> int:
    corpus = datagen.load_corpus(args.corpus)
    train_split = corpus.split("train")
    if not train_split.utterances:
        train_split = corpus
    feature_dim = train_split.utterances[0].features.shape[1]
    cfg = M.ModelConfig(
        variant=args.variant,
        num_layers=args.layers,
        input_dim=feature_dim,
        embedding_dim=corpus.speakers[0].embedding.shape[0],
    )
    bundle = M.build_model(cfg, args.seed)
    tcfg = trainer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        p0=args.p0,
        seed=args.seed,
        spec_augment=args.spec_augment,
        examples_per_epoch=args.examples_per_epoch,
        speakers_per_example=(args.min_speakers, args.max_speakers),
    )
    trained, history = trainer.train(bundle, train_split, tcfg)
    save_model(trained, args.out)
    print(json.dumps({"model": str(args.out), "variant": args.variant, "loss_history": history}))
    return 0


def cmd_quantize(args) -> int:
    bundle = load_model(args.input)
    if isinstance(bundle, QuantizedBundle):
        raise ContractError("model is already quantized")
    qb, report = quant.quantize_model(bundle)
    save_model(qb, args.output)
    print(json.dumps({"model": str(args.output), **report.to_dict()}))
    return 0


def cmd_eval(args) -> int:
    bundle = _float_bundle(load_model(args.model))
    corpus = datagen.load_corpus(args.corpus)
    examples = _eval_examples(corpus, args.examples, args.seed, (args.min_speakers, args.max_speakers))
    report = trainer.evaluate(bundle, examples, args.threshold, args.no_enroll)
    print(report.to_text())
    if args.metrics_out:
        report.write(args.metrics_out)
    return 0


def _enrollment_embedding(args, bundle: M.ModelBundle) -> np.ndarray:
    dim = bundle.config.embedding_dim
    if args.no_enroll:
        return np.zeros(dim, dtype=np.float32)
    if args.enroll_embedding:
        return datagen.read_embedding(args.enroll_embedding, dim)
    if args.enroll_wav:
        if not bundle.config.uses_prenet:
            raise ContractError("enrollment from audio needs a prenet/combined model; pass --enroll-embedding")
        feats = compute_features(read_wav(args.enroll_wav))
        if len(feats) == 0:
            raise InputError("enrollment audio is shorter than one frame")
        frames = M.prenet_embeddings(bundle, feats).astype(np.float64)
        frames /= np.maximum(np.linalg.norm(frames, axis=1, keepdims=True), 1e-8)
        mean = frames.mean(axis=0)
        return (mean / np.linalg.norm(mean)).astype(np.float32)
    raise ContractError("one of --enroll-embedding, --enroll-wav or --no-enroll is required")


def _iter_chunks(args, chunk_samples: int):
    if args.audio == "-":
        stream = sys.stdin.buffer
        while True:
            data = stream.read(2 * chunk_samples)
            if not data:
                return
            if len(data) % 2:
                raise InputError("raw PCM16 input ended mid-sample")
            yield AudioBuffer(np.frombuffer(data, dtype="<i2").astype(np.int16))
    else:
        audio = read_wav(args.audio)
        for start in range(0, len(audio), chunk_samples):
            yield AudioBuffer(audio.samples[start : start + chunk_samples])


def cmd_stream(args) -> int:
    bundle = _float_bundle(load_model(args.model))
    session = StreamSession(bundle, _enrollment_embedding(args, bundle), args.threshold)
    chunk_samples = int(round(args.chunk_ms * SAMPLE_RATE / 1000))
    if chunk_samples <= 0:
        raise ContractError("--chunk-ms must be positive")
    passed = 0
    out = sys.stdout
    for chunk in _iter_chunks(args, chunk_samples):
        result = session.push(chunk)
        for i, (p, ok) in enumerate(zip(result.posteriors, result.passed)):
            passed += int(ok)
            if not args.summary_only:
                out.write(json.dumps({
                    "frame": result.start_frame + i,
                    "time_s": round((result.start_frame + i) * 0.03, 3),
                    "p_tss": round(float(p[0]), 6),
                    "p_ntss": round(float(p[1]), 6),
                    "p_ns": round(float(p[2]), 6),
                    "decision": "pass" if ok else "suppress",
                }) + "\n")
        out.flush()
    session.flush()
    summary = {
        "frames": session.frames_emitted,
        "passed": passed,
        "enrollmentless": session.enrollmentless,
        "threshold": session.threshold,
    }
    (out if args.summary_only else sys.stderr).write(json.dumps(summary) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    err = M.model_gradcheck(args.variant, args.seed)
    ok = err < args.tolerance
    print(json.dumps({"variant": args.variant, "seed": args.seed, "max_relative_error": err, "pass": ok}))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvad", description="Personal VAD toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--utterances", type=int, default=24, help="utterances per speaker")
    p.add_argument("--mode", choices=("feature", "audio"), default="feature")
    p.add_argument("--embedding-dim", type=int, default=datagen.EMBEDDING_DIM)
    p.add_argument("--eval-fraction", type=float, default=0.25)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model on a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", choices=M.VARIANTS, default="combined")
    p.add_argument("--p0", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--examples-per-epoch", type=int, default=128)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--min-speakers", type=int, default=2)
    p.add_argument("--max-speakers", type=int, default=3)
    p.add_argument("--spec-augment", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="int8-quantize a float model")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="frame-level metrics on a corpus directory")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--threshold", type=float, default=M.DEFAULT_THRESHOLD)
    p.add_argument("--no-enroll", action="store_true", help="enrollment-less condition")
    p.add_argument("--examples", type=int, default=64)
    p.add_argument("--min-speakers", type=int, default=2)
    p.add_argument("--max-speakers", type=int, default=2)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--metrics-out", help="write the report as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="stream a WAV file (or raw PCM16 on stdin with '-')")
    p.add_argument("--model", required=True)
    p.add_argument("audio", help="PCM16 mono 16 kHz WAV path, or '-' for raw PCM16 on stdin")
    enroll = p.add_mutually_exclusive_group(required=True)
    enroll.add_argument("--enroll-embedding", help="little-endian float32 embedding file")
    enroll.add_argument("--enroll-wav", help="enrollment WAV (prenet/combined models only)")
    enroll.add_argument("--no-enroll", action="store_true")
    p.add_argument("--threshold", type=float, default=M.DEFAULT_THRESHOLD)
    p.add_argument("--chunk-ms", type=float, default=100.0)
    p.add_argument("--summary-only", action="store_true")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    p.add_argument("--variant", choices=M.VARIANTS, default="combined")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _error_line(exc: Exception) -> str:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, LoadError):
        payload["field"] = exc.field
    return json.dumps(payload)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except BrokenPipeError:
        # downstream reader (e.g. ``head``) went away; not an error
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except (PVADError, OSError) as exc:
        sys.stderr.write(_error_line(exc) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
