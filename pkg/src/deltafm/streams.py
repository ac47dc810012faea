"""One independent random stream per consumer, all derived from a master seed.

Keeping consumers on separate streams means that e.g. drawing negatives never
shifts the times drawn for the positives, which is what makes a lambda=0
contrastive run bit-identical to a plain flow-matching run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NAMES = ("t", "negatives", "noise", "batch", "dropout", "sampler")


@dataclass
class Streams:
    t: np.random.Generator
    negatives: np.random.Generator
    noise: np.random.Generator
    batch: np.random.Generator
    dropout: np.random.Generator
    sampler: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        children = np.random.SeedSequence(seed).spawn(len(NAMES))
        return cls(*(np.random.default_rng(c) for c in children))
