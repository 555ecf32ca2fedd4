"""Named random streams: every stream is a hash of (root seed, purpose, index...),
so adding a sweep cell never perturbs the draws of another."""
import hashlib

import numpy as np


def stream_seed(root, purpose, *index):
    key = "/".join([str(int(root)), str(purpose)] + [str(i) for i in index])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def stream(root, purpose, *index):
    return np.random.default_rng(stream_seed(root, purpose, *index))
