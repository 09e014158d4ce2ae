"""Synthetic gesture streams: class-discriminative moving-shape event sources.

Each class renders a moving shape as a boolean occupancy mask per
millisecond; pixels that become covered emit ON events (leading edge) and
pixels that become uncovered emit OFF events (trailing edge). Shape sizes
and speeds scale with the frame so mean event rates stay in the low tens of
thousands per second at 128x128 and above 1k/s at 32x32.

Streams are deterministic in (class_id, seed); the seed varies phase, speed
and position so samples of one class differ while keeping its motion
signature.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .errors import UnknownClass
from .events import US_PER_MS, EventStream
from .rng import substream

N_CLASSES = 11


def load_catalog() -> dict[int, dict]:
    """Load the class catalog data file: class_id -> {name, description}."""
    text = resources.files("fewspike").joinpath("data/gesture_catalog.json").read_text()
    raw = json.loads(text)
    return {entry["class_id"]: entry for entry in raw["classes"]}


def _params(class_id: int, rng: np.random.Generator, w: int, h: int) -> dict:
    """Draw per-sample motion parameters. Draw order is fixed per class."""
    r = min(w, h)
    p: dict = {"cx": (w - 1) / 2.0, "cy": (h - 1) / 2.0, "r": r}
    speed_mul = float(rng.uniform(0.8, 1.25))
    phase = float(rng.uniform(0.0, 1.0))
    p["speed_mul"] = speed_mul
    p["phase"] = phase
    # Motion cycles fit well inside one presentation (periods <= ~220 ms),
    # so the time-integrated footprint of a sample is phase-invariant:
    # two samples of a class cover the same path regardless of start phase.
    if class_id <= 3:
        p["angle"] = np.deg2rad(45.0 * class_id)
        p["length"] = 0.22 * r
        p["thick"] = max(2.0, r / 40.0)
        p["span"] = 0.6 * r
        p["v"] = (0.6 * r / 180.0) * speed_mul    # px per ms along the normal
        p["lateral"] = float(rng.uniform(-0.05, 0.05)) * r
    elif class_id in (4, 5):
        p["orbit"] = 0.30 * r
        p["dot_r"] = max(1.6, r / 16.0)
        p["omega"] = (2 * np.pi / 200.0) * speed_mul  # rad per ms
        p["sign"] = -1.0 if class_id == 4 else 1.0    # cw vs ccw in image coords
    elif class_id in (6, 7):
        p["r_min"] = 0.06 * r
        p["r_max"] = 0.24 * r
        p["period"] = 230.0 / speed_mul               # ms per sweep
        p["thick"] = max(1.5, r / 48.0)
        p["grow"] = class_id == 6
    elif class_id == 8:
        p["amp"] = 0.17 * r
        p["sep"] = 0.16 * r
        p["dot_r"] = max(1.6, r / 16.0)
        p["omega"] = (2 * np.pi / 180.0) * speed_mul
    elif class_id == 9:
        p["half"] = max(2.0, 0.06 * r)
        p["speed"] = (r / 150.0) * speed_mul
        p["redraw_ms"] = 30
        p["pos"] = np.array([w / 2.0, h / 2.0]) + rng.uniform(-0.1, 0.1, size=2) * r
    elif class_id == 10:
        p["amp_x"] = 0.28 * r
        p["amp_y"] = 0.24 * r
        p["dot_r"] = max(1.6, r / 22.0)
        p["omega"] = (2 * np.pi / 200.0) * speed_mul
    return p


def _disk(xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _render(class_id: int, k: int, p: dict, xx: np.ndarray, yy: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
    cx, cy = p["cx"], p["cy"]
    if class_id <= 3:
        a = p["angle"]
        ux, uy = np.cos(a), np.sin(a)
        nx, ny = -uy, ux
        s = -p["span"] / 2 + (p["phase"] * p["span"] + p["v"] * k) % p["span"]
        bx = cx + nx * s + ux * p["lateral"]
        by = cy + ny * s + uy * p["lateral"]
        dpu = (xx - bx) * ux + (yy - by) * uy
        dpn = (xx - bx) * nx + (yy - by) * ny
        return (np.abs(dpn) <= p["thick"] / 2) & (np.abs(dpu) <= p["length"] / 2)
    if class_id in (4, 5):
        th = 2 * np.pi * p["phase"] + p["sign"] * p["omega"] * k
        return _disk(xx, yy, cx + p["orbit"] * np.cos(th), cy + p["orbit"] * np.sin(th),
                     p["dot_r"])
    if class_id in (6, 7):
        frac = (p["phase"] + k / p["period"]) % 1.0
        if not p["grow"]:
            frac = 1.0 - frac
        radius = p["r_min"] + frac * (p["r_max"] - p["r_min"])
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        return np.abs(d - radius) <= p["thick"]
    if class_id == 8:
        dx = p["amp"] * np.cos(2 * np.pi * p["phase"] + p["omega"] * k)
        top = _disk(xx, yy, cx - dx, cy - p["sep"], p["dot_r"])
        bot = _disk(xx, yy, cx + dx, cy + p["sep"], p["dot_r"])
        return top | bot
    if class_id == 9:
        if k % p["redraw_ms"] == 0:
            ang = rng.uniform(0, 2 * np.pi)
            p["vel"] = p["speed"] * np.array([np.cos(ang), np.sin(ang)])
        pos = p["pos"] + p["vel"]
        # reflect at borders, keeping the blob fully inside
        w_hi = xx.shape[1] - 1 - p["half"]
        h_hi = xx.shape[0] - 1 - p["half"]
        for i, hi in ((0, w_hi), (1, h_hi)):
            if pos[i] < p["half"]:
                pos[i] = 2 * p["half"] - pos[i]
                p["vel"][i] = -p["vel"][i]
            elif pos[i] > hi:
                pos[i] = 2 * hi - pos[i]
                p["vel"][i] = -p["vel"][i]
        p["pos"] = pos
        return (np.abs(xx - pos[0]) <= p["half"]) & (np.abs(yy - pos[1]) <= p["half"])
    # figure eight
    th = 2 * np.pi * p["phase"] + p["omega"] * k
    return _disk(xx, yy, cx + p["amp_x"] * np.sin(th), cy + p["amp_y"] * np.sin(2 * th),
                 p["dot_r"])


def synth_gesture(class_id: int, seed: int, duration_ms: int = 1450,
                  width: int = 128, height: int = 128) -> EventStream:
    """Generate one synthetic gesture sample as an event stream.

    Deterministic in (class_id, seed). ON events mark pixels entering the
    shape, OFF events mark pixels leaving it; event times get sub-bin
    offsets so streams look sensor-like while staying time-sorted.
    """
    if class_id not in load_catalog():
        raise UnknownClass(f"class_id {class_id} not in catalog")
    rng = substream(seed, "synth", class_id)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    p = _params(class_id, rng, width, height)

    ts, xs, ys, ps = [], [], [], []
    prev = np.zeros((height, width), dtype=bool)
    for k in range(duration_ms):
        mask = _render(class_id, k, p, xx, yy, rng)
        on_y, on_x = np.nonzero(mask & ~prev)
        off_y, off_x = np.nonzero(prev & ~mask)
        n = on_x.size + off_x.size
        if n:
            offs = np.sort(rng.integers(0, US_PER_MS, size=n))
            ts.append(k * US_PER_MS + offs)
            xs.append(np.concatenate([on_x, off_x]))
            ys.append(np.concatenate([on_y, off_y]))
            ps.append(np.concatenate([np.ones(on_x.size, dtype=np.uint8),
                                      np.zeros(off_x.size, dtype=np.uint8)]))
        prev = mask

    if not ts:
        return EventStream.empty(width, height, duration_ms * US_PER_MS)
    return EventStream(width, height, np.concatenate(ts), np.concatenate(xs),
                       np.concatenate(ys), np.concatenate(ps),
                       duration_ms * US_PER_MS)
