"""Synthetic speakers, utterances and concatenated conversational examples.

Synthetic speakers stand in for real enrolled users: each gets a seeded
unit-norm embedding plus either a Gaussian feature cluster (feature mode) or
a fundamental frequency for harmonic tone bursts (audio mode). Frame labels
are known exactly from construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, LoadError
from .frontend import N_FFT, SAMPLE_RATE, AudioBuffer, compute_features, read_wav, write_wav
from .model import NS, NTSS, TSS

FEATURE_DIM = 512
EMBEDDING_DIM = 256
CLUSTER_SIGMA = 0.1
CLUSTER_RADIUS = 2.0
SPEECH, NONSPEECH = 1, 0
MODEL_HOP = 480  # samples per model frame (10 ms shift x subsample 3)


@dataclass
class SyntheticSpeaker:
    id: int
    embedding: np.ndarray
    f0: float
    cluster_mean: np.ndarray | None = None


@dataclass
class Utterance:
    id: str
    speaker_id: int
    features: np.ndarray
    vad_labels: np.ndarray  # 1 = speech, 0 = nonspeech, per model frame
    audio: AudioBuffer | None = None
    split: str = "train"


@dataclass
class LabeledExample:
    features: np.ndarray
    labels: np.ndarray  # uint8 over {TSS, NTSS, NS}
    target_embedding: np.ndarray
    target_speaker_id: int | None = None

    @property
    def enrollmentless(self) -> bool:
        return not np.any(self.target_embedding != 0)


class Corpus(NamedTuple):
    speakers: list[SyntheticSpeaker]
    utterances: list[Utterance]

    def speaker(self, speaker_id: int) -> SyntheticSpeaker:
        for s in self.speakers:
            if s.id == speaker_id:
                return s
        raise ContractError(f"unknown speaker id {speaker_id}")

    def split(self, name: str) -> "Corpus":
        return Corpus(self.speakers, [u for u in self.utterances if u.split == name])


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def speaker_embedding(seed: int, speaker_id: int, dim: int = EMBEDDING_DIM) -> np.ndarray:
    return _unit(np.random.default_rng([seed, speaker_id, 0]).standard_normal(dim)).astype(np.float32)


def _segments(rng, n_bursts, burst_range, gap_range, edge_range):
    """Alternating (is_speech, length) runs: edge, burst, gap, burst, ..., edge."""
    runs = [(False, int(rng.integers(*edge_range)))]
    for i in range(n_bursts):
        if i:
            runs.append((False, int(rng.integers(*gap_range))))
        runs.append((True, int(rng.integers(*burst_range))))
    runs.append((False, int(rng.integers(*edge_range))))
    return runs


def _feature_utterance(rng, speaker, silence_mean, uid):
    runs = _segments(rng, int(rng.integers(1, 4)), (6, 16), (2, 6), (2, 5))
    labels = np.concatenate([np.full(n, SPEECH if sp else NONSPEECH, dtype=np.uint8) for sp, n in runs])
    means = np.where(labels[:, None] == SPEECH, speaker.cluster_mean[None, :], silence_mean[None, :])
    feats = (means + CLUSTER_SIGMA * rng.standard_normal(means.shape)).astype(np.float32)
    return Utterance(uid, speaker.id, feats, labels)


def _burst(rng, f0, n):
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi, 5)
    tone = sum((0.6**h) * np.sin(2 * np.pi * f0 * (h + 1) * t + phase[h]) for h in range(5))
    ramp = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / 80.0)
    return 0.3 * 32767 * tone / 2.0 * ramp


def audio_frame_labels(speech_mask: np.ndarray) -> np.ndarray:
    """Model-frame VAD labels from a per-sample speech mask.

    Model frame ``t`` is centred on base frame ``3t``, whose analysis window is
    samples ``[480t, 480t + 512)``. It is speech iff that whole window lies
    inside a tone burst, so every frame touching a silence gap is nonspeech.
    """
    n = len(speech_mask)
    if n < N_FFT:
        return np.zeros(0, dtype=np.uint8)
    n_base = (n - N_FFT) // 160 + 1
    starts = np.arange(0, n_base, 3) * 160
    silent = np.concatenate([[0], np.cumsum(~speech_mask)])
    silent_in_window = silent[starts + N_FFT] - silent[starts]
    return (silent_in_window == 0).astype(np.uint8)


def _audio_utterance(rng, speaker, uid):
    runs = _segments(rng, int(rng.integers(1, 4)), (4800, 12800), (3200, 8000), (1600, 4800))
    pieces, mask = [], []
    for sp, n in runs:
        pieces.append(_burst(rng, speaker.f0, n) if sp else np.zeros(n))
        mask.append(np.full(n, sp))
    signal = np.concatenate(pieces) + rng.normal(0, 3.0, sum(n for _, n in runs))
    samples = np.clip(np.round(signal), -32768, 32767).astype(np.int16)
    audio = AudioBuffer(samples)
    speech_mask = np.concatenate(mask)
    return Utterance(uid, speaker.id, compute_features(audio), audio_frame_labels(speech_mask), audio)


def synth_corpus(
    seed: int,
    n_speakers: int,
    utterances_per_speaker: int,
    mode: str = "feature",
    embedding_dim: int = EMBEDDING_DIM,
    eval_fraction: float = 0.0,
    cluster_radius: float = CLUSTER_RADIUS,
) -> Corpus:
    """Deterministic synthetic corpus.

    The last ``round(eval_fraction * utterances_per_speaker)`` utterances of
    every speaker are tagged ``split="eval"``. Feature-mode cluster means are
    random directions of norm ``cluster_radius``.
    """
    if n_speakers < 2:
        raise ConfigurationError("synth_corpus needs at least 2 speakers")
    if mode not in ("feature", "audio"):
        raise ConfigurationError(f"mode must be 'feature' or 'audio', got {mode!r}")
    if utterances_per_speaker < 1:
        raise ConfigurationError("utterances_per_speaker must be >= 1")
    f0s = np.linspace(100.0, 300.0, n_speakers)
    silence_mean = cluster_radius * _unit(np.random.default_rng([seed, 1, 0]).standard_normal(FEATURE_DIM))
    n_eval = int(round(eval_fraction * utterances_per_speaker))
    speakers, utterances = [], []
    for sid in range(n_speakers):
        spk = SyntheticSpeaker(
            sid,
            speaker_embedding(seed, sid, embedding_dim),
            float(f0s[sid]),
            cluster_radius * _unit(np.random.default_rng([seed, sid, 1]).standard_normal(FEATURE_DIM)),
        )
        speakers.append(spk)
        for u in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, sid, 2, u])
            uid = f"s{sid:03d}u{u:04d}"
            utt = _feature_utterance(rng, spk, silence_mean, uid) if mode == "feature" else _audio_utterance(rng, spk, uid)
            utt.split = "eval" if u >= utterances_per_speaker - n_eval else "train"
            utterances.append(utt)
    return Corpus(speakers, utterances)


def concat_example(
    utterances: Sequence[Utterance],
    target_speaker: int,
    speakers: Sequence[SyntheticSpeaker],
    rng: np.random.Generator | None = None,
) -> LabeledExample:
    """Concatenate utterances into one conversational example for ``target_speaker``.

    With ``rng`` the segment order is shuffled first.
    """
    if not utterances:
        raise ContractError("concat_example needs at least one utterance")
    if target_speaker not in {u.speaker_id for u in utterances}:
        raise ContractError(f"target speaker {target_speaker} does not contribute to the example")
    order = list(utterances)
    if rng is not None:
        order = [order[i] for i in rng.permutation(len(order))]
    labels = []
    for u in order:
        speech_label = TSS if u.speaker_id == target_speaker else NTSS
        labels.append(np.where(u.vad_labels == SPEECH, speech_label, NS).astype(np.uint8))
    emb = next(s.embedding for s in speakers if s.id == target_speaker)
    return LabeledExample(
        np.concatenate([u.features for u in order]),
        np.concatenate(labels),
        emb.copy(),
        target_speaker,
    )


def make_examples(
    corpus: Corpus,
    n_examples: int,
    rng: np.random.Generator,
    speakers_per_example: tuple[int, int] = (2, 3),
) -> list[LabeledExample]:
    """Draw ``n_examples`` multi-speaker concatenations with a random target."""
    by_speaker: dict[int, list[Utterance]] = {}
    for u in corpus.utterances:
        by_speaker.setdefault(u.speaker_id, []).append(u)
    ids = sorted(by_speaker)
    lo, hi = speakers_per_example
    hi = min(hi, len(ids))
    lo = min(lo, hi)
    out = []
    for _ in range(n_examples):
        k = int(rng.integers(lo, hi + 1))
        chosen = rng.choice(ids, size=k, replace=False)
        utts = [by_speaker[s][int(rng.integers(len(by_speaker[s])))] for s in chosen]
        target = int(chosen[int(rng.integers(k))])
        out.append(concat_example(utts, target, corpus.speakers, rng))
    return out


def single_speaker_examples(corpus: Corpus) -> list[LabeledExample]:
    """One enrolled example per utterance (target = its own speaker)."""
    return [concat_example([u], u.speaker_id, corpus.speakers) for u in corpus.utterances]


def apply_enrollmentless_paradigm(
    batch: Sequence[LabeledExample], p0: float = 0.2, rng: np.random.Generator | None = None
) -> list[LabeledExample]:
    """Bernoulli(p0) per example: zero the embedding and relabel ntss as tss."""
    if not 0.0 <= p0 <= 1.0:
        raise ConfigurationError(f"p0 must be in [0, 1], got {p0}")
    rng = rng if rng is not None else np.random.default_rng()
    selected = rng.random(len(batch)) < p0
    out = []
    for ex, sel in zip(batch, selected):
        if sel:
            labels = np.where(ex.labels == NTSS, TSS, ex.labels).astype(np.uint8)
            out.append(LabeledExample(ex.features, labels, np.zeros_like(ex.target_embedding), ex.target_speaker_id))
        else:
            out.append(ex)
    return out


def spec_augment(
    features: np.ndarray,
    n_freq_masks: int,
    max_freq_width: int,
    n_time_masks: int,
    max_time_width: int,
    rng: np.random.Generator,
    n_bins: int = 128,
    return_masks: bool = False,
):
    """Zero random frequency bands and time spans.

    Frequency masks live in the 128-bin space and are replicated across the
    stacked sub-frames. With ``return_masks`` the recorded
    ``(freq_masks, time_masks)`` as ``(start, width)`` pairs are returned too.
    """
    feats = np.array(features, copy=True)
    t, dim = feats.shape
    n_stack = max(dim // n_bins, 1)
    bins = dim // n_stack
    freq_masks, time_masks = [], []
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, max_freq_width + 1))
        w = min(w, bins)
        f = int(rng.integers(0, bins - w + 1))
        freq_masks.append((f, w))
        for s in range(n_stack):
            feats[:, s * bins + f : s * bins + f + w] = 0
    for _ in range(n_time_masks):
        w = min(int(rng.integers(0, max_time_width + 1)), t)
        s0 = int(rng.integers(0, t - w + 1))
        time_masks.append((s0, w))
        feats[s0 : s0 + w] = 0
    if return_masks:
        return feats, (freq_masks, time_masks)
    return feats


# export / import ---------------------------------------------------------------------

_HEADER = np.dtype("<u4")


def write_features(path: Path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    with open(path, "wb") as f:
        f.write(np.array(feats.shape, dtype=_HEADER).tobytes())
        f.write(feats.tobytes())


def read_features(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise LoadError(str(path), "feature file shorter than its header")
    rows, cols = np.frombuffer(data[:8], dtype=_HEADER)
    if len(data) != 8 + 4 * int(rows) * int(cols):
        raise LoadError(str(path), f"payload size does not match header ({rows}x{cols})")
    return np.frombuffer(data[8:], dtype="<f4").reshape(int(rows), int(cols)).astype(np.float32)


def write_embedding(path: Path, emb: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(emb, dtype="<f4").tobytes())


def read_embedding(path: Path, dim: int | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) % 4:
        raise LoadError(str(path), "embedding file length is not a multiple of 4")
    emb = np.frombuffer(data, dtype="<f4").astype(np.float32)
    if dim is not None and emb.shape[0] != dim:
        raise LoadError(str(path), f"embedding has length {emb.shape[0]}, expected {dim}")
    return emb


def export_corpus(corpus: Corpus, out_dir: str | Path, mode: str = "feature", seed: int | None = None) -> Path:
    """Write ``manifest.json`` plus per-utterance feature/label files and per-speaker embeddings.

    Utterance label files hold one byte per frame from the utterance's own
    speaker's point of view (0 = speech, 2 = nonspeech). Utterances that
    carry a waveform also get ``audio/<id>.wav``.
    """
    out = Path(out_dir)
    for d in ("features", "labels", "speakers"):
        (out / d).mkdir(parents=True, exist_ok=True)
    speakers = []
    for s in corpus.speakers:
        rel = f"speakers/spk{s.id:03d}.emb"
        write_embedding(out / rel, s.embedding)
        speakers.append({"id": s.id, "embedding": rel, "f0": s.f0})
    utts = []
    for u in corpus.utterances:
        feat_rel, lab_rel = f"features/{u.id}.f32", f"labels/{u.id}.lab"
        write_features(out / feat_rel, u.features)
        own = np.where(u.vad_labels == SPEECH, TSS, NS).astype(np.uint8)
        (out / lab_rel).write_bytes(own.tobytes())
        entry = {"id": u.id, "speaker_id": u.speaker_id, "split": u.split,
                 "features": feat_rel, "labels": lab_rel}
        if u.audio is not None:
            (out / "audio").mkdir(exist_ok=True)
            entry["audio"] = f"audio/{u.id}.wav"
            write_wav(out / entry["audio"], u.audio)
        utts.append(entry)
    manifest = {
        "format": "pvad-corpus",
        "version": 1,
        "mode": mode,
        "seed": seed,
        "feature_dim": int(corpus.utterances[0].features.shape[1]) if corpus.utterances else FEATURE_DIM,
        "embedding_dim": int(corpus.speakers[0].embedding.shape[0]),
        "speakers": speakers,
        "utterances": utts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise LoadError("manifest", f"no manifest.json in {root}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError("manifest", f"invalid JSON: {exc}") from exc
    if manifest.get("format") != "pvad-corpus":
        raise LoadError("format", "not a pvad corpus manifest")
    dim = manifest["embedding_dim"]
    speakers = [
        SyntheticSpeaker(s["id"], read_embedding(root / s["embedding"], dim), float(s["f0"]))
        for s in manifest["speakers"]
    ]
    utterances = []
    for u in manifest["utterances"]:
        feats = read_features(root / u["features"])
        own = np.frombuffer((root / u["labels"]).read_bytes(), dtype=np.uint8)
        if len(own) != len(feats):
            raise LoadError(u["labels"], "label count does not match feature rows")
        vad = (own == TSS).astype(np.uint8)
        audio = read_wav(root / u["audio"]) if "audio" in u else None
        utterances.append(Utterance(u["id"], u["speaker_id"], feats, vad, audio, u.get("split", "train")))
    return Corpus(speakers, utterances)
