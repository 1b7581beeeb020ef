import numpy as np

from specexit import rng

# reference outputs of the scalar splitmix64 recurrence for state 0,
# recomputed independently with pure-integer arithmetic below
KNOWN_SEED0 = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]

MASK = (1 << 64) - 1


def _scalar_splitmix64(seed, n):
    out = []
    state = seed
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_known_answer_seed0():
    assert rng.splitmix64(0, 3).tolist() == KNOWN_SEED0
    assert _scalar_splitmix64(0, 3) == KNOWN_SEED0


def test_vectorized_matches_scalar():
    for seed in (1, 42, 2**64 - 1, 0xDEADBEEF):
        assert rng.splitmix64(seed, 17).tolist() == _scalar_splitmix64(seed, 17)


def test_uniform_range_and_dtype():
    u = rng.uniform(5, 4096, -0.25, 0.25)
    assert u.dtype == np.float32
    assert u.min() >= -0.25 and u.max() < 0.25
    # the stream should fill the interval reasonably evenly
    assert abs(float(u.mean())) < 0.01


def test_uniform_deterministic():
    assert np.array_equal(rng.uniform(9, 100, 0, 1), rng.uniform(9, 100, 0, 1))
    assert not np.array_equal(rng.uniform(9, 100, 0, 1), rng.uniform(10, 100, 0, 1))


def test_derive_distinct_children():
    children = {rng.derive(123, i) for i in range(64)}
    assert len(children) == 64
    assert rng.derive(123, 0) == rng.derive(123, 0)
