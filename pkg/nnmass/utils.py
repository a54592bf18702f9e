import threading

from collections import Counter

import numpy as np


class classproperty(object):
    """
    Like a mix between classmethod and property

    https://stackoverflow.com/questions/5189699

    Used for the named presets (`SweepGrid.desk`, `TrainConfig.desk`, ...). If we need this to be writable at some
        point, use the more complex method given there.
    """
    def __init__(self, f):
        self.f = f

    def __get__(self, obj, owner):
        return self.f(owner)


def generator(seed, *keys):
    """
    Get a numpy Generator for the stream named by (seed, *keys).

    Args:
        seed (int): The 64-bit master seed.
        keys (int): Any number of non-negative integers naming a sub-stream, ie (mass index, trial index).

    Returns:
        numpy.random.Generator: A Philox backed generator. Philox is counter-based, so the same (seed, *keys) gives
            the same stream on every platform regardless of what else was drawn before.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def derive_seed(seed, *keys):
    """Derive a new 64-bit seed from a master seed and a path of integer keys."""
    state = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


class Instrumentation(object):
    """
    Thread-safe event counters.

    The design module promises never to realize a topology or allocate weights. The topology and network modules bump
        these counters so tests can hold it to that.
    """
    def __init__(self):
        self._lock = threading.Lock()
        self._counts = Counter()

    def increment(self, name, amount=1):
        with self._lock:
            self._counts[name] += amount

    def __getitem__(self, name):
        with self._lock:
            return self._counts[name]

    def snapshot(self):
        with self._lock:
            return dict(self._counts)


counters = Instrumentation()
