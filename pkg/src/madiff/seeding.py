import hashlib

import numpy as np


def derive_seed(root, *names):
    """Split a root seed deterministically by a path of names."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(root, *names):
    return np.random.default_rng(derive_seed(root, *names))
