"""Fourier range encoding of axis-aligned boxes.

A box with center ``(x, y)`` and extent ``(sx, sy)`` is encoded, for each
integer frequency pair ``(tx, ty)``, as an envelope
``exp(-sx (1 - cos tx) - sy (1 - cos ty))`` times the phasor at
``phase_scale * (tx x + ty y)``. All cosine entries come first, then all
sine entries. Translation is a phasor rotation and widening is a
multiplication by another envelope, so both act on encodings directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class FrequencySet:
    pairs: np.ndarray  # (n, 2) integers, columns tx, ty
    theta_max: int
    theta_low: int
    seed: int
    phase_scale: float = np.pi
    envelope_scale: float = 1.0

    def __len__(self):
        return len(self.pairs)

    @property
    def dim(self):
        return 2 * len(self.pairs)

    def __eq__(self, other):
        return (
            isinstance(other, FrequencySet)
            and np.array_equal(self.pairs, other.pairs)
            and (self.theta_max, self.theta_low, self.seed, self.phase_scale, self.envelope_scale)
            == (other.theta_max, other.theta_low, other.seed, other.phase_scale, other.envelope_scale)
        )

    def to_dict(self):
        return {
            "pairs": self.pairs.tolist(),
            "theta_max": self.theta_max,
            "theta_low": self.theta_low,
            "seed": self.seed,
            "phase_scale": self.phase_scale,
            "envelope_scale": self.envelope_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["pairs"], dtype=np.int64).reshape(-1, 2),
            int(d["theta_max"]),
            int(d["theta_low"]),
            int(d["seed"]),
            float(d["phase_scale"]),
            float(d["envelope_scale"]),
        )


def frequency_lattice(theta_max):
    tx, ty = np.meshgrid(np.arange(-theta_max, theta_max + 1), np.arange(0, theta_max + 1), indexing="ij")
    return np.stack([tx.ravel(), ty.ravel()], axis=1)


def low_disc(theta_max, theta_low):
    lattice = frequency_lattice(theta_max)
    return lattice[(lattice ** 2).sum(axis=1) <= theta_low ** 2]


def make_frequency_set(theta_max=48, theta_low=6, total=128, seed=0, phase_scale=np.pi, envelope_scale=1.0):
    """Every pair inside the low-frequency disc plus a fixed random remainder."""
    if theta_low > theta_max:
        raise ValueError("theta_low must not exceed theta_max")
    lattice = frequency_lattice(theta_max)
    inside = (lattice ** 2).sum(axis=1) <= theta_low ** 2
    disc, rest = lattice[inside], lattice[~inside]
    if total < len(disc):
        raise ValueError(f"total={total} is smaller than the {len(disc)} forced low-frequency pairs")
    if total - len(disc) > len(rest):
        raise ValueError(f"only {len(disc) + len(rest)} pairs exist for theta_max={theta_max}")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(rest), total - len(disc), replace=False))
    pairs = np.concatenate([disc, rest[picked]]).astype(np.int64)
    return FrequencySet(pairs, theta_max, theta_low, seed, float(phase_scale), float(envelope_scale))


def envelope(sx, sy, f):
    """Per-pair envelope factor for extents ``(sx, sy)``; broadcasts over leading axes."""
    sx = np.asarray(sx, dtype=np.float64)[..., None]
    sy = np.asarray(sy, dtype=np.float64)[..., None]
    tx = f.pairs[:, 0] * f.envelope_scale
    ty = f.pairs[:, 1] * f.envelope_scale
    return np.exp(-sx * (1 - np.cos(tx)) - sy * (1 - np.cos(ty)))


def _phase(x, y, f):
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    return f.phase_scale * (f.pairs[:, 0] * x + f.pairs[:, 1] * y)


def encode_boxes(boxes, f):
    """Encode an ``(n, 4)`` array of ``(x, y, sx, sy)`` rows; returns ``(n, 2 * len(f))``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if np.any(boxes[..., 2:] < 0):
        raise ValueError("box width and height must be non-negative")
    env = envelope(boxes[..., 2], boxes[..., 3], f)
    ph = _phase(boxes[..., 0], boxes[..., 1], f)
    return np.concatenate([env * np.cos(ph), env * np.sin(ph)], axis=-1)


def encode_box(box, f):
    return encode_boxes(np.asarray(box, dtype=np.float64).reshape(1, 4), f)[0]


def _check_len(e, f):
    if np.shape(e)[-1] != f.dim:
        raise ValueError(f"encoding length {np.shape(e)[-1]} does not match frequency set ({f.dim})")


def overlap_score(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"encoding lengths differ: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def shift_encoding(e, dx, dy, f):
    """Translate an encoded box by ``(dx, dy)`` via per-pair phasor rotation."""
    e = np.asarray(e, dtype=np.float64)
    _check_len(e, f)
    n = len(f)
    c, s = e[..., :n], e[..., n:]
    ph = _phase(dx, dy, f)
    cos, sin = np.cos(ph), np.sin(ph)
    return np.concatenate([c * cos - s * sin, s * cos + c * sin], axis=-1)


def expand_encoding(e, dsx, dsy, f):
    """Widen an encoded box by ``(dsx, dsy)``: multiply both blocks by the envelope."""
    e = np.asarray(e, dtype=np.float64)
    _check_len(e, f)
    env = envelope(dsx, dsy, f)
    return e * np.concatenate([env, env], axis=-1)


def decode_on_grid(e, f, xs, ys):
    """Real spatial function whose Fourier coefficients are the encoding.

    ``xs`` and ``ys`` are 1-D axes; the result has shape ``(len(xs), len(ys))``.
    """
    e = np.asarray(e, dtype=np.float64)
    _check_len(e, f)
    n = len(f)
    # c cos(p) + s sin(p) = Re[(c - i s) exp(i p)], and exp(i p) factors over the axes
    w = e[:n] - 1j * e[n:]
    ex = np.exp(1j * f.phase_scale * np.outer(np.asarray(xs, dtype=np.float64), f.pairs[:, 0]))
    ey = np.exp(1j * f.phase_scale * np.outer(np.asarray(ys, dtype=np.float64), f.pairs[:, 1]))
    return np.real((ex * w) @ ey.T)
