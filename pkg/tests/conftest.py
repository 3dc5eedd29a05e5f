import numpy as np
import pytest

from pvad import datagen as D
from pvad import model as M
from pvad import trainer as T

# Small but structurally complete config for fast unit tests.
TINY = dict(num_layers=2, model_dim=16, heads=2, conv_kernel=3, left_context=4,
            embedding_dim=8, prenet_layers=1, ffn_expansion=2)

ACCEPTANCE_SEED = 7
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def tiny_config(variant="combined", **overrides):
    return M.ModelConfig(variant=variant, **{**TINY, **overrides})


def unit(rng, n):
    v = rng.standard_normal(n)
    return (v / np.linalg.norm(v)).astype(np.float32)


def random_audio(rng, seconds):
    n = int(seconds * 16000)
    return np.clip(rng.normal(0, 3000, n), -32768, 32767).astype(np.int16)


class AcceptanceData:
    """Seeded 4-speaker feature corpus plus lazily trained models, shared across modules."""

    def __init__(self):
        self.corpus = D.synth_corpus(ACCEPTANCE_SEED, 4, 24, eval_fraction=0.25)
        self.train_split = self.corpus.split("train")
        self.eval_examples = D.make_examples(self.corpus.split("eval"), 64, np.random.default_rng(99), (2, 2))
        self._models = {}

    def trained(self, variant, p0=0.0):
        key = (variant, p0)
        if key not in self._models:
            bundle = M.build_model(M.ModelConfig(variant=variant), seed=0)
            cfg = T.TrainConfig(epochs=30, p0=p0, seed=1, speakers_per_example=(2, 2))
            self._models[key] = T.train(bundle, self.train_split, cfg)
        return self._models[key]


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceData()


@pytest.fixture
def record():
    def _record(criterion, ok, detail):
        # a criterion spanning several tests passes only if all of its parts do
        prev_ok, prev_detail = ACCEPTANCE_RESULTS.get(criterion, (True, ""))
        joined = f"{prev_detail}; {detail}" if prev_detail else detail
        ACCEPTANCE_RESULTS[criterion] = (prev_ok and bool(ok), joined)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  ({detail})")
