import numpy as np
import pytest

from prada import teacher as tch
from prada.model import ModelConfig, StudentModel


def tiny_config(**kw):
    base = dict(hidden=8, layers=2, heads=2, max_seq=64, prompt_len=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, **kw):
    return StudentModel(tiny_config(**kw), seed=seed)


def perturb(model, seed=0, scale=0.3):
    """Push parameters away from the near-symmetric init so gradients are not tiny."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = p.data + rng.normal(0, scale, p.data.shape)
    return model


SHORT_Q = ["ab cd ###", "efg h ###", "ij k lm ###"]
SHORT_C = ["b d --> bd END", "g h --> gh END", "j k m --> jkm END"]


@pytest.fixture
def short_pairs():
    return list(zip(SHORT_Q, SHORT_C))


@pytest.fixture(scope="session")
def small_datasets():
    src, tgt = tch.default_shift("last_letter")
    return tch.build_domain_datasets(src, tgt, 40, 40, n_eval=20)


# One line per acceptance criterion, printed after the run even when output is captured.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
