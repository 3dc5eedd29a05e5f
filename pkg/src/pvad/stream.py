"""Streaming inference: chunked PCM in, gated target-speaker frames out."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import load_model, save_model  # noqa: F401  (re-exported)
from .errors import ContractError
from .frontend import AudioBuffer, FrontendState, frontend_push
from .model import DEFAULT_THRESHOLD, Decision, ModelBundle, ModelState, forward_stream, initial_state
from .quant import QuantizedBundle

EMBEDDING_NORM_TOL = 1e-3


@dataclass
class GatedOutput:
    """Per-frame results for the frames completed by one push.

    ``features[i]`` is the frame's feature row when it passed and ``None``
    when it was suppressed.
    """

    start_frame: int
    posteriors: np.ndarray
    passed: np.ndarray
    features: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.posteriors)

    @property
    def decisions(self) -> list[Decision]:
        return [Decision.PASS if p else Decision.SUPPRESS for p in self.passed]

    @property
    def passed_features(self) -> np.ndarray:
        rows = [f for f in self.features if f is not None]
        return np.stack(rows) if rows else np.zeros((0, 0), dtype=np.float32)


def _empty_output(start: int) -> GatedOutput:
    return GatedOutput(start, np.zeros((0, 3), dtype=np.float32), np.zeros(0, dtype=bool), [])


class StreamSession:
    """One audio stream bound to a model and a target embedding (or the zero sentinel)."""

    def __init__(self, bundle: ModelBundle | QuantizedBundle, embedding, threshold: float = DEFAULT_THRESHOLD):
        if isinstance(bundle, QuantizedBundle):
            bundle = bundle.dequantized()
        cfg = bundle.config
        emb = np.asarray(embedding, dtype=np.float32)
        if emb.shape != (cfg.embedding_dim,):
            raise ContractError(f"embedding must have length {cfg.embedding_dim}, got shape {emb.shape}")
        norm = float(np.linalg.norm(emb.astype(np.float64)))
        if norm != 0 and abs(norm - 1) > EMBEDDING_NORM_TOL:
            raise ContractError(f"embedding norm {norm:.6f} is neither 0 (enrollment-less) nor 1")
        self.bundle = bundle
        self.embedding = emb
        self.threshold = float(threshold)
        self.enrollmentless = norm == 0
        self.frontend_state = FrontendState()
        self.model_state: ModelState = initial_state(cfg)
        self.frames_emitted = 0

    def push_features(self, features: np.ndarray) -> GatedOutput:
        """Run already-extracted model frames through the network."""
        start = self.frames_emitted
        features = np.asarray(features, dtype=np.float32)
        if len(features) == 0:
            return _empty_output(start)
        posteriors, self.model_state = forward_stream(self.bundle, features, self.embedding, self.model_state)
        passed = posteriors[:, 0] >= self.threshold
        self.frames_emitted += len(posteriors)
        rows = [features[i] if passed[i] else None for i in range(len(passed))]
        return GatedOutput(start, posteriors, passed, rows)

    def push(self, chunk: AudioBuffer) -> GatedOutput:
        if len(chunk) == 0:
            return _empty_output(self.frames_emitted)
        self.frontend_state, features = frontend_push(self.frontend_state, chunk)
        return self.push_features(features)

    def flush(self) -> GatedOutput:
        """End of stream. The stacking is causal, so nothing is left to emit."""
        return _empty_output(self.frames_emitted)

    @property
    def attention_cache_rows(self) -> list[int]:
        return [s.attention.shape[-2] for s in self.model_state.backbone + self.model_state.prenet]


def stream_init(bundle, embedding, threshold: float = DEFAULT_THRESHOLD) -> StreamSession:
    return StreamSession(bundle, embedding, threshold)


def stream_push(session: StreamSession, chunk: AudioBuffer) -> GatedOutput:
    return session.push(chunk)
