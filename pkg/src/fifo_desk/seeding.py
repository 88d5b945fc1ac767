"""Deterministic sub-seed derivation.

All randomness of a run flows from one master seed. Sub-seeds are derived by
folding a component name and an index into the master seed with the
splitmix64 finalizer:

    z = (z + 0x9E3779B97F4A7C15) mod 2^64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2^64
    z =  z ^ (z >> 31)
"""

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_1 = 0xBF58476D1CE4E5B9
MIX_2 = 0x94D049BB133111EB


def splitmix64(value: int) -> int:
    """One splitmix64 step applied to a 64-bit state."""
    z = (value + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * MIX_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_2) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, component: str, index: int = 0) -> int:
    """Derive a 64-bit sub-seed for (component, index) from the master seed.

    Args:
        master_seed: Run-wide master seed
        component: Name of the consumer, e.g. "scene/train/CW"
        index: Position within the component (sample index, iteration)

    Returns:
        Unsigned 64-bit seed
    """
    state = splitmix64(master_seed & MASK64)
    for byte in component.encode("utf-8"):
        state = splitmix64(state ^ byte)
    return splitmix64(state ^ (index & MASK64))
