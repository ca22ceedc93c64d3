import numpy as np

from voiceshield.signal import Waveform


def sine(freq, n=4096, sr=16000, amp=0.5, phase=0.0):
    t = np.arange(n) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), sr)


def noise(n=4096, seed=0, amp=0.3, sr=16000):
    return Waveform(np.clip(amp * np.random.default_rng(seed).standard_normal(n), -1, 1), sr)


def central_diff(f, x, step=1e-5):
    """Numerical gradient of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


def rel_err(a, b, floor=1e-4):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


# acceptance criterion number -> one-line verdict, echoed in the terminal summary
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok
