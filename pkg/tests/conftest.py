import numpy as np
import pytest

from salfau.data import Sample


def synthetic_samples(count, size, seed=0):
    """Cheap in-memory samples: a bright square on a dark noisy background."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        mask = np.zeros((1, size, size), np.float32)
        r0, c0 = rng.integers(0, size // 2, size=2)
        mask[:, r0:r0 + size // 3, c0:c0 + size // 3] = 1
        image = rng.uniform(0, 0.3, size=(3, size, size)).astype(np.float32) + 0.6 * mask
        out.append(Sample(image, mask, f"s{i}"))
    return out


@pytest.fixture
def tiny_samples():
    return synthetic_samples(6, 16)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record a criterion outcome; the summary prints one PASS/FAIL line each."""

    def record(number, title, checks):
        failed = [desc for desc, ok in checks if not ok]
        _ACCEPTANCE[number] = (not failed, title if not failed else f"{title} (failed: {'; '.join(failed)})")
        assert not failed, failed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, text = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {text}")
