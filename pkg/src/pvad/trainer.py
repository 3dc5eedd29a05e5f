"""Frame-level cross-entropy training and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .datagen import Corpus, LabeledExample, apply_enrollmentless_paradigm, make_examples, spec_augment
from .errors import ConfigurationError, ContractError, TrainingError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    p0: float = 0.2
    seed: int = 0
    spec_augment: bool = False
    examples_per_epoch: int = 128
    speakers_per_example: tuple[int, int] = (2, 3)
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not 0.0 <= self.p0 <= 1.0:
            raise ConfigurationError("p0 must be in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1 or self.examples_per_epoch < 1:
            raise ConfigurationError("batch_size and examples_per_epoch must be >= 1")


def cross_entropy_loss(posteriors: np.ndarray, labels: np.ndarray) -> float:
    """Mean of ``-log p(label_t)`` over frames, with p floored at 1e-12."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(labels)
    if posteriors.shape[:-1] != labels.shape:
        raise ContractError(f"{labels.shape[0]} labels for {posteriors.shape[0]} posterior rows")
    p = np.take_along_axis(posteriors, labels[..., None].astype(np.intp), axis=-1)[..., 0]
    return float(np.mean(-np.log(np.maximum(p, M.LABEL_FLOOR)))) if p.size else 0.0


def pad_batch(examples: Sequence[LabeledExample]):
    """Right-pad to a common length. Causality makes the padding invisible to real frames."""
    t = max(len(e.labels) for e in examples)
    dim = examples[0].features.shape[1]
    feats = np.zeros((len(examples), t, dim), dtype=np.float32)
    labels = np.full((len(examples), t), M.NS, dtype=np.int64)
    mask = np.zeros((len(examples), t), dtype=bool)
    for i, e in enumerate(examples):
        n = len(e.labels)
        feats[i, :n] = e.features
        labels[i, :n] = e.labels
        mask[i, :n] = True
    embs = np.stack([e.target_embedding for e in examples]).astype(np.float32)
    return feats, embs, labels, mask


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (params[k] - update).astype(params[k].dtype)


class SGD:
    def __init__(self, params: dict, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] = (params[k] - self.lr * g).astype(params[k].dtype)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * np.float32(scale)
    return norm


def train(bundle: M.ModelBundle, corpus: Corpus, config: TrainConfig):
    """Train a copy of ``bundle``; returns ``(trained_bundle, per-epoch mean losses)``.

    Each epoch draws fresh concatenated examples, resamples the enrollment-less
    subset with probability ``p0``, optionally applies SpecAug, and takes one
    optimizer step per minibatch.
    """
    if not corpus.utterances:
        raise ContractError("training corpus is empty")
    trained = bundle.copy()
    params = trained.tensors
    cfg = trained.config
    opt = (
        Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        if config.optimizer == "adam"
        else SGD(params, config.learning_rate)
    )
    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        examples = make_examples(corpus, config.examples_per_epoch, rng, config.speakers_per_example)
        examples = apply_enrollmentless_paradigm(examples, config.p0, rng)
        if config.spec_augment:
            examples = [
                LabeledExample(spec_augment(e.features, 2, 12, 2, 4, rng), e.labels, e.target_embedding,
                               e.target_speaker_id)
                for e in examples
            ]
        order = rng.permutation(len(examples))
        losses, weights = [], []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            feats, embs, labels, mask = pad_batch(batch)
            loss, grads = M.loss_and_grads(params, cfg, feats, embs, labels, mask)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            if config.learning_rate != 0:
                clip_global_norm(grads, config.clip_norm)
                opt.step(params, grads)
            losses.append(loss)
            weights.append(int(mask.sum()))
        history.append(float(np.average(losses, weights=weights)))
        log.info("epoch %d loss %.4f", epoch, history[-1])
    return trained, history


@dataclass
class EvalReport:
    frame_accuracy: float
    confusion: list[list[int]]
    speech_miss_rate: float
    false_accept_rate: float
    frames: int = 0
    threshold: float = M.DEFAULT_THRESHOLD
    enrollmentless: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def speech_recall(self) -> float:
        return 1.0 - self.speech_miss_rate

    def to_text(self) -> str:
        names = M.CLASSES
        lines = [
            f"frames              {self.frames}",
            f"condition           {'enrollment-less' if self.enrollmentless else 'enrollment'}",
            f"threshold           {self.threshold:g}",
            f"frame_accuracy      {self.frame_accuracy:.4f}",
            f"speech_miss_rate    {self.speech_miss_rate:.4f}",
            f"false_accept_rate   {self.false_accept_rate:.4f}",
            "confusion (rows = truth, cols = argmax)",
            "        " + " ".join(f"{n:>7}" for n in names),
        ]
        for n, row in zip(names, self.confusion):
            lines.append(f"{n:>7} " + " ".join(f"{c:>7d}" for c in row))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speech_recall"] = self.speech_recall
        return d

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def remap_standard_vad(labels: np.ndarray) -> np.ndarray:
    """Ground truth for the enrollment-less condition: every speech frame is tss."""
    return np.where(labels == M.NTSS, M.TSS, labels)


def evaluate_posteriors(
    posteriors: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    threshold: float = M.DEFAULT_THRESHOLD,
    enrollmentless: bool = False,
) -> EvalReport:
    confusion = np.zeros((3, 3), dtype=np.int64)
    tss = miss = neg = fa = 0
    for p, y in zip(posteriors, labels):
        y = np.asarray(y).astype(np.int64)
        if len(p) != len(y):
            raise ContractError("posterior/label length mismatch")
        pred = np.argmax(p, axis=-1)
        np.add.at(confusion, (y, pred), 1)
        passed = M.decisions(p, threshold)
        is_tss = y == M.TSS
        tss += int(is_tss.sum())
        miss += int((is_tss & ~passed).sum())
        neg += int((~is_tss).sum())
        fa += int((~is_tss & passed).sum())
    total = int(confusion.sum())
    return EvalReport(
        frame_accuracy=float(np.trace(confusion) / total) if total else 0.0,
        confusion=confusion.tolist(),
        speech_miss_rate=miss / tss if tss else 0.0,
        false_accept_rate=fa / neg if neg else 0.0,
        frames=total,
        threshold=threshold,
        enrollmentless=enrollmentless,
    )


def predict(bundle: M.ModelBundle, examples: Sequence[LabeledExample], enrollmentless: bool = False,
            batch_size: int = 16) -> list[np.ndarray]:
    out = []
    for start in range(0, len(examples), batch_size):
        batch = list(examples[start : start + batch_size])
        feats, embs, _, _ = pad_batch(batch)
        if enrollmentless:
            embs = np.zeros_like(embs)
        p = M.forward(bundle, feats, embs)
        out += [p[i, : len(e.labels)] for i, e in enumerate(batch)]
    return out


def evaluate(
    bundle: M.ModelBundle,
    examples: Sequence[LabeledExample],
    threshold: float = M.DEFAULT_THRESHOLD,
    enrollmentless: bool = False,
) -> EvalReport:
    """Frame metrics; with ``enrollmentless`` the zero embedding is fed and ntss counts as tss."""
    posteriors = predict(bundle, examples, enrollmentless)
    labels = [remap_standard_vad(e.labels) if enrollmentless else e.labels for e in examples]
    return evaluate_posteriors(posteriors, labels, threshold, enrollmentless)
