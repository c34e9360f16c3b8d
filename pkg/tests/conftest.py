import numpy as np
import pytest

from dirsep.audio import Waveform


def harmonic_tone(f0, duration_s=2.0, sr=8000, n_harmonics=12, seed=0):
    """Simple deterministic harmonic voice stand-in for unit tests."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(duration_s * sr)) / sr
    x = np.zeros_like(t)
    for h in range(1, n_harmonics + 1):
        if h * f0 >= sr / 2:
            break
        x += np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
    return Waveform((0.5 * x / np.max(np.abs(x))).astype(np.float32), sr)


@pytest.fixture
def make_tone():
    return harmonic_tone
