#seeding.py
import numpy as np

ENV_STREAM = 0
DATA_STREAM = 1
TRUTH_STREAM = 2
TEST_STREAM = 3
FOLD_STREAM = 4
INIT_STREAM = 5
ORACLE_STREAM = 6


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox stream; (seed, *keys) are mixed by SeedSequence hashing."""
    entropy = [int(seed)] + [int(key) for key in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
