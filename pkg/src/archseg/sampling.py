"""Class-balanced subject sampling for training loops."""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterator, Sequence

import numpy as np


def weighted_sampler(
    labels: Sequence[str], seed: int = 0
) -> Iterator[int]:
    """Endless stream of indices drawn with probability ∝ 1/class frequency.

    With-replacement draws, so long-run class frequencies are uniform no
    matter how unbalanced the roster is.
    """
    if len(labels) == 0:
        raise ValueError("empty roster")
    counts = Counter(labels)
    if any(c == 0 for c in counts.values()):
        raise ValueError("empty class in roster")
    weights = np.array([1.0 / counts[lab] for lab in labels], dtype=np.float64)
    probs = weights / weights.sum()
    rng = np.random.default_rng(seed)
    while True:
        yield int(rng.choice(len(labels), p=probs))
