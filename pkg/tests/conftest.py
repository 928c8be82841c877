import itertools

import numpy as np
import pytest

from lukv.trace_model import ModelShape, TraceBundle, generate_synthetic_trace


def bundle_from(decode_attn, vnorm, prefill_attn=None, keys=None):
    decode_attn = np.asarray(decode_attn, dtype=np.float32)
    L, H, K, T = decode_attn.shape
    d = 0 if keys is None else np.asarray(keys).shape[-1]
    return TraceBundle(ModelShape(L, H, T, K, d), decode_attn, np.asarray(vnorm, dtype=np.float32),
                       prefill_attn=prefill_attn, keys=keys)


def brute_min_allocation(curves, B):
    """Exhaustive minimum of sum curve[b] with sum b == B."""
    curves = np.asarray(curves, dtype=np.float64)
    T = curves.shape[-1] - 1
    best = None
    for combo in itertools.product(range(T + 1), repeat=curves.shape[0]):
        if sum(combo) == B:
            v = sum(curves[i, t] for i, t in enumerate(combo))
            if best is None or v < best[0]:
                best = (v, combo)
    return best


def brute_gcm(values):
    """Greatest convex minorant at integer points: max over all chords below the points.

    For each i, the minorant is the max over pairs (a <= i <= c) of the chord
    value at i, restricted to chords lying below every point.
    """
    y = np.asarray(values, dtype=np.float64)
    n = y.size
    out = np.full(n, -np.inf)
    for a in range(n):
        for c in range(a, n):
            xs = np.arange(a, c + 1)
            chord = y[a] + (y[c] - y[a]) * (xs - a) / max(c - a, 1)
            # a supporting chord must stay below all points on its whole line
            slope = (y[c] - y[a]) / max(c - a, 1)
            line = y[a] + slope * (np.arange(n) - a)
            if np.all(line <= y + 1e-12):
                out[a:c + 1] = np.maximum(out[a:c + 1], chord)
    return out


@pytest.fixture(scope="session")
def small_shape():
    return ModelShape(2, 4, 64, 8, 16)


@pytest.fixture(scope="session")
def mixed_bundle(small_shape):
    return generate_synthetic_trace(small_shape, 7, "mixed")


@pytest.fixture(scope="session")
def misaligned_bundle(small_shape):
    return generate_synthetic_trace(small_shape, 3, "misaligned")


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.LINES:
            terminalreporter.write_line(line)
