import numpy as np
import pytest

from sscontour.features import ImageChannels
from sscontour.sparse import fast_sparse_code_batch
from sscontour.synthetic import generate_image
from sscontour.tokens import TokenSet, TokenSource


def make_tokens(rng, n_l, n_u, m=4, size=20, n_atoms=16, coded=True):
    """Random tokens on one random 13-plane image with random structured labels.

    l-token labels come from a few prototype masks so Pi has real structure;
    u-tokens get random confidences and (optionally) sparse codes of their
    dictionary patches under a random unit-norm dictionary.
    """
    planes = rng.random((13, size, size)).astype(np.float32)
    dict_planes = rng.random((4, size, size))
    src = TokenSource("rand", ImageChannels(planes), m, dict_planes)
    n = n_l + n_u
    cy = rng.integers(0, size, n)
    cx = rng.integers(0, size, n)
    protos = rng.random((3, m, m)) < 0.3
    labels = np.zeros((n, m, m), dtype=bool)
    labels[:n_l] = protos[rng.integers(0, 3, n_l)]
    conf = np.ones(n)
    conf[n_l:] = rng.uniform(0.5, 1.0, n_u)
    ts = TokenSet(m, [src], np.zeros(n), cy, cx, np.arange(n) < n_l, conf, labels)
    if coded:
        A = rng.standard_normal((4 * m * m, n_atoms))
        A /= np.linalg.norm(A, axis=0)
        ts.code_idx, ts.code_val = fast_sparse_code_batch(ts.dict_patches(), A, 3)
    return ts


@pytest.fixture(scope="session")
def tiny_corpus():
    """Eight 40x40 synthetic images with exact boundaries."""
    rng = np.random.default_rng(123)
    return [generate_image(rng, (40, 40)) for _ in range(8)]


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool, detail: str) -> bool:
    """Keep one PASS/FAIL line per acceptance criterion for the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
