"""SplitMix64, the scenario-wide pseudo random generator."""
from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def prng_next(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; return (new_state, output)."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int = 0):
        self.state = seed & MASK64
        self.draws = 0

    def next_u64(self) -> int:
        self.state, out = prng_next(self.state)
        self.draws += 1
        return out

    def next_float(self) -> float:
        """Uniform in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))
