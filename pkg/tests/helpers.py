import numpy as np

from aquagrasp.camera import WarpSpec


def translation_spec(cam, tx=0.0, ty=0.0, tz=0.0, Z=1.0):
    return WarpSpec(cam, cam, np.eye(3), (tx, ty, tz), Z)


def pixel_grid(cam):
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    return u, v


TIME_EPS = 1e-9


def brute_force_closure(t, w, window, min_drop, min_plateau, plateau_tol):
    """Exhaustive scan: index of the earliest qualifying sample, or None."""
    t = np.asarray(t, dtype=float)
    w = np.asarray(w, dtype=float)
    for i in range(len(t)):
        past = (t >= t[i] - window - TIME_EPS) & (t <= t[i])
        if w[past].max() - w[i] < min_drop - TIME_EPS:
            continue
        if t[-1] < t[i] + min_plateau - TIME_EPS:
            continue
        ahead = (t >= t[i]) & (t <= t[i] + min_plateau + TIME_EPS)
        if np.ptp(w[ahead]) <= plateau_tol + TIME_EPS:
            return i
    return None


def closure_corpus(n, seed, rate=10.0, duration=12.0):
    """Synthetic aperture signals: clean steps, ramps and noisy steps.

    Drop sizes and ramp slopes straddle the default detector thresholds so
    both detections and misses occur; noise amplitudes span 0.02-0.1.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(int(duration * rate)) / rate
    out = []
    for i in range(n):
        kind = i % 3
        t0 = rng.uniform(2.0, 9.0)
        hi = rng.uniform(0.8, 1.0)
        lo = hi - rng.uniform(0.1, 0.8)
        if kind == 0:
            w = np.where(t < t0, hi, lo)
        elif kind == 1:
            ramp = rng.uniform(0.1, 3.0)  # seconds from hi to lo
            w = np.clip(hi - (hi - lo) * (t - t0) / ramp, lo, hi)
        else:
            amp = rng.uniform(0.02, 0.1)
            w = np.where(t < t0, hi, lo) + rng.uniform(-amp, amp, size=t.shape)
        out.append((kind, t0, t, w))
    return out


# one line per acceptance criterion, printed in the pytest terminal summary
ACCEPTANCE_LINES = []


def report_criterion(name, ok, elapsed, limit, detail):
    status = "PASS" if ok and (limit is None or elapsed < limit) else "FAIL"
    budget = "" if limit is None else f" (limit {limit:.0f}s)"
    line = f"{name} {status}: {detail}; {elapsed:.1f}s{budget}"
    ACCEPTANCE_LINES.append(line)
    print(line)
