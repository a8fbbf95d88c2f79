"""Deterministic, stream-keyed random number generation.

Every random draw in the package is made from a counter-based generator
(Philox) keyed by a master seed plus an integer stream id.  Draws therefore
depend only on (seed, stream id), never on thread count or the order in
which work items happen to run.
"""
from __future__ import annotations

import numpy as np

from .errors import BadRangeError

# Lane constants appended to stream ids so that the noise draw and the
# spectral starting vectors of the same (sample, timestep, repetition)
# never share a stream.  Retries get their own lanes.
LANE_NOISE = 0
LANE_SPECTRAL = 1
LANE_NOISE_RETRY = 2
LANE_SPECTRAL_RETRY = 3
LANE_TRAIN = 4
LANE_DATA = 5


class RngStream:
    """A named, reproducible random stream.

    Parameters
    ----------
    seed : int
        Master seed shared by all streams of a run.
    stream : tuple of int
        Stream id, typically (sample index, timestep index, repetition
        index, lane).  Identical (seed, stream) pairs yield identical
        draws on every platform.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        for s in self.stream:
            if s < 0:
                raise BadRangeError("stream id components must be non-negative")

    def child(self, *lanes: int) -> "RngStream":
        """Return a sub-stream with extra id components appended."""
        return RngStream(self.seed, self.stream + tuple(lanes))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def gaussian_vec(rng: RngStream, dim: int, std: float) -> np.ndarray:
    """Draw one N(0, std^2 I) vector of length `dim` from `rng`.

    The draw restarts the stream, so calling twice with the same stream
    returns bitwise-identical vectors.  std = 0 returns the zero vector.
    """
    if dim < 1:
        raise BadRangeError(f"dim must be >= 1, got {dim}")
    if std < 0:
        raise BadRangeError(f"std must be >= 0, got {std}")
    if std == 0.0:
        return np.zeros(dim)
    return std * rng.generator().standard_normal(dim)
