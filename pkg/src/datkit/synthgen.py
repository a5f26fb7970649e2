"""Synthetic biased embeddings for desk-scale verification.

Labels live on the first coordinate axis and gender on the second, with
isotropic Gaussian noise on top, so a linear probe can read off exactly how
much protected information survives a trained encoder. The default joint
distribution over (gender, label) follows the published training-split
breakdown of the interview corpus this toolkit targets.

Sampling uses an explicit 64-bit linear congruential generator plus the
polar Box-Muller transform so that a seed pins the dataset bit-for-bit on
any platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datapipe import Example
from .errors import ConfigError

# (gender, label) cells in fixed order: male/pos, male/neg, female/pos, female/neg.
GROUPS = ((0, 1), (0, 0), (1, 1), (1, 0))
TABLE_COUNTS = (719, 3227, 939, 2188)
DEFAULT_JOINT = tuple(c / sum(TABLE_COUNTS) for c in TABLE_COUNTS)


class Lcg64:
    """Deterministic 64-bit LCG (MMIX constants) with polar-method gaussians."""

    MULT = 6364136223846793005
    INC = 1442695040888963407
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK
        self._spare: float | None = None

    def next_u64(self) -> int:
        self.state = (self.state * self.MULT + self.INC) & self.MASK
        return self.state

    def uniform(self) -> float:
        return (self.next_u64() >> 11) / float(1 << 53)

    def gauss(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        while True:
            u = 2.0 * self.uniform() - 1.0
            v = 2.0 * self.uniform() - 1.0
            s = u * u + v * v
            if 0.0 < s < 1.0:
                scale = math.sqrt(-2.0 * math.log(s) / s)
                self._spare = v * scale
                return u * scale

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]


@dataclass(frozen=True)
class SynthConfig:
    n: int
    dim: int = 32
    joint: tuple[float, float, float, float] = DEFAULT_JOINT
    label_signal: float = 1.0
    gender_signal: float = 1.0
    noise_sigma: float = 0.5
    seed: int = 0
    split: str = "train"
    task: str = "depression"

    def validate(self) -> None:
        if self.n < 0:
            raise ConfigError(f"n must be >= 0, got {self.n}")
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2 to carry both signal axes, got {self.dim}")
        if abs(sum(self.joint) - 1.0) > 1e-9 or any(p < 0 for p in self.joint):
            raise ConfigError(f"joint must be 4 nonnegative probabilities summing to 1, got {self.joint}")
        if self.label_signal < 0 or self.gender_signal < 0 or self.noise_sigma <= 0:
            raise ConfigError("signals must be >= 0 and noise_sigma > 0")


def allocate_counts(n: int, joint) -> tuple[int, int, int, int]:
    """Largest-remainder rounding of n * joint; always sums to n."""
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    exact = [n * p for p in joint]
    counts = [int(math.floor(e)) for e in exact]
    remainders = sorted(range(4), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(n - sum(counts)):
        counts[remainders[i]] += 1
    return tuple(counts)


def generate(config: SynthConfig) -> list[Example]:
    """Seeded draw of n biased embeddings with the configured group mix."""
    config.validate()
    counts = allocate_counts(config.n, config.joint)
    rng = Lcg64(config.seed)
    examples: list[Example] = []
    serial = 0
    for (gender, label), count in zip(GROUPS, counts):
        for _ in range(count):
            vec = np.empty(config.dim, dtype=np.float64)
            for k in range(config.dim):
                vec[k] = config.noise_sigma * rng.gauss()
            vec[0] += config.label_signal * label
            vec[1] += config.gender_signal * gender
            examples.append(
                Example(
                    id=f"synth-{serial:06d}",
                    participant=f"spk-{serial:06d}",
                    gender=gender,
                    label=label,
                    split=config.split,
                    embedding=vec.astype(np.float32),
                )
            )
            serial += 1
    rng.shuffle(examples)
    return examples
