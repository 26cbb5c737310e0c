import math

import numpy as np
import pytest

from beamkit.core import ChannelSet, SystemConfig


def random_channels(rng, k, n):
    h = (rng.standard_normal((k, n)) + 1j * rng.standard_normal((k, n))) / np.sqrt(2.0)
    return ChannelSet(h)


def row_agreement(d1, d2):
    """Phase-invariant per-row agreement ``|<d1_k, d2_k>|`` (1 means same direction)."""
    return np.abs(np.sum(np.conj(d1) * d2, axis=1))


def split_leaky(z, slope=0.01):
    re = z.real if z.real > 0 else slope * z.real
    im = z.imag if z.imag > 0 else slope * z.imag
    return complex(re, im)


def naive_cgal(x, ws, wn, wm, a, crelu=True):
    """Direct per-head, per-node, per-neighbour evaluation of the attention layer."""
    heads, out_dim, _ = ws.shape
    k = x.shape[0]
    out = np.zeros((k, heads * out_dim), dtype=complex)
    gammas = np.zeros((heads, k, k))
    for d in range(heads):
        for i in range(k):
            scores = []
            for j in range(k):
                z = ws[d] @ x[i] + wn[d] @ x[j]
                e = sum(a[d, o] * split_leaky(z[o]) for o in range(out_dim))
                scores.append(abs(e))
            m = max(scores)
            ex = [math.exp(s - m) for s in scores]
            tot = sum(ex)
            msg = np.zeros(out_dim, dtype=complex)
            for j in range(k):
                gammas[d, i, j] = ex[j] / tot
                msg += gammas[d, i, j] * (wm[d] @ x[j])
            out[i, d * out_dim:(d + 1) * out_dim] = msg
    if crelu:
        out = np.maximum(out.real, 0) + 1j * np.maximum(out.imag, 0)
    return out, gammas


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cfg3():
    return SystemConfig.uniform(3, 0.5, 0.5)


# acceptance reporting ------------------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
