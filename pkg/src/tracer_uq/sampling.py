"""Evaluation of sample batches, serially or in a process pool, with caching.

Results are always returned in index order, so every reduction over them
is independent of the number of workers.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .rng import METHOD_QMC, RandomStream
from .sobol import RandomizedSobol

_WORKER_MODEL = None
_WORKER_SOBOL = {}


def _init_worker(model):
    global _WORKER_MODEL
    _WORKER_MODEL = model
    _WORKER_SOBOL.clear()


def _eval_pair(args):
    level, index, seed, method = args
    t = time.perf_counter()
    qf, qc = _WORKER_MODEL.sample_pair(level, index, seed, method)
    return qf, qc, time.perf_counter() - t


def _sobol(model, level, seed, n_random):
    key = (level, seed, n_random)
    if key not in _WORKER_SOBOL:
        dim = model.qmc_dimension(level)
        _WORKER_SOBOL[key] = RandomizedSobol(dim, RandomStream(seed, (METHOD_QMC, level)), n_random)
    return _WORKER_SOBOL[key]


def _eval_qmc(args):
    level, m, n, seed, n_random = args
    seq = _sobol(_WORKER_MODEL, level, seed, n_random)
    t = time.perf_counter()
    q = _WORKER_MODEL.evaluate_qmc(level, seq.next_point(m, n))
    return q, None, time.perf_counter() - t


class SampleEvaluator:
    """Evaluates ``model`` samples for one seed; caches every result it computes.

    ``workers > 1`` distributes samples over a process pool. A
    :class:`~tracer_uq.ledger.SampleCache` may be attached to persist samples
    across runs.
    """

    def __init__(self, model, seed: int, workers: int = 1, cache=None, n_random: int = 32):
        self.model = model
        self.seed = int(seed)
        self.workers = int(workers)
        self.cache = cache
        self.n_random = n_random
        self._memory = {}
        self._pool = None
        self.evaluated = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _map(self, func, tasks):
        if self.workers <= 1 or len(tasks) < 2:
            _init_worker(self.model) if _WORKER_MODEL is not self.model else None
            return [func(t) for t in tasks]
        if self._pool is None:
            getattr(self.model, "reference", None)  # computed once, shipped to the workers
            self._pool = ProcessPoolExecutor(self.workers, initializer=_init_worker, initargs=(self.model,))
        chunk = max(1, len(tasks) // (4 * self.workers))
        return list(self._pool.map(func, tasks, chunksize=chunk))

    def _fetch(self, method, level, keys, make_task, func):
        """Results for integer ``keys`` (cache first, then evaluation), in key order."""
        store = self._memory.setdefault((method, level), {})
        missing = [k for k in keys if k not in store]
        if missing and self.cache is not None:
            lo, hi = min(missing), max(missing) + 1
            store.update(self.cache.get_range(method, self.seed, level, lo, hi))
            missing = [k for k in keys if k not in store]
        if missing:
            results = self._map(func, [make_task(k) for k in missing])
            fresh = list(zip(missing, results))
            store.update(fresh)
            self.evaluated += len(fresh)
            if self.cache is not None:
                self.cache.put_many(method, self.seed, level, fresh)
        return [store[k] for k in keys]

    def pairs(self, level: int, start: int, stop: int, method: int):
        """``(Q_fine, Q_coarse, wall)`` arrays for sample indices ``start..stop-1``."""
        keys = list(range(start, stop))
        res = self._fetch(method, level, keys, lambda k: (level, k, self.seed, method), _eval_pair)
        return _stack(res, self.model.n_qoi)

    def qmc(self, level: int, m: int, start: int, stop: int):
        """QMC evaluations of randomization ``m`` at points ``start..stop-1``."""
        base = m << 32
        keys = [base + n for n in range(start, stop)]
        res = self._fetch(METHOD_QMC, level, keys,
                          lambda k: (level, k >> 32, k & 0xFFFFFFFF, self.seed, self.n_random), _eval_qmc)
        qf, _, wall = _stack(res, self.model.n_qoi)
        return qf, wall


def _stack(res, n_qoi):
    n = len(res)
    qf = np.empty((n, n_qoi))
    qc = np.zeros((n, n_qoi))
    wall = np.empty(n)
    has_coarse = False
    for i, (f, c, w) in enumerate(res):
        qf[i] = f
        if c is not None:
            qc[i] = c
            has_coarse = True
        wall[i] = w
    return qf, (qc if has_coarse else None), wall
