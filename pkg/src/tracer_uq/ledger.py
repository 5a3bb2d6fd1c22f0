"""Persistent sample cache (SQLite) keyed by ``(method, seed, level, index)``.

Stored values are the raw float64 bytes of the QoI vectors, so a cached
sample is bit-identical to a fresh evaluation. A fingerprint of the model
configuration is stored on creation; opening the cache with a different
fingerprint is refused.
"""

from __future__ import annotations

import sqlite3

import numpy as np


class LedgerError(RuntimeError):
    pass


class FingerprintMismatch(LedgerError):
    pass


class SampleCache:
    def __init__(self, path, fingerprint: str):
        self.path = str(path)
        try:
            self._db = sqlite3.connect(self.path)
            self._db.execute("CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT)")
            self._db.execute(
                "CREATE TABLE IF NOT EXISTS samples (method INTEGER, seed TEXT, level INTEGER, idx INTEGER, "
                "fine BLOB, coarse BLOB, wall REAL, PRIMARY KEY (method, seed, level, idx))")
            row = self._db.execute("SELECT value FROM meta WHERE key='fingerprint'").fetchone()
            if row is None:
                self._db.execute("INSERT INTO meta VALUES ('fingerprint', ?)", (fingerprint,))
                self._db.commit()
            elif row[0] != fingerprint:
                raise FingerprintMismatch(
                    f"cache {self.path} was written by a different configuration (fingerprint {row[0][:12]}...)")
        except sqlite3.Error as exc:
            raise LedgerError(f"cannot open sample cache {self.path}: {exc}") from exc
        self.fingerprint = fingerprint

    def get_range(self, method: int, seed: int, level: int, start: int, stop: int) -> dict:
        cur = self._db.execute(
            "SELECT idx, fine, coarse, wall FROM samples WHERE method=? AND seed=? AND level=? AND idx>=? AND idx<?",
            (method, str(seed), level, start, stop))
        out = {}
        for idx, fine, coarse, wall in cur:
            qf = np.frombuffer(fine, dtype=np.float64).copy()
            qc = None if coarse is None else np.frombuffer(coarse, dtype=np.float64).copy()
            out[idx] = (qf, qc, wall)
        return out

    def put_many(self, method: int, seed: int, level: int, items) -> None:
        rows = [(method, str(seed), level, int(idx), np.asarray(qf, dtype=np.float64).tobytes(),
                 None if qc is None else np.asarray(qc, dtype=np.float64).tobytes(), float(wall))
                for idx, (qf, qc, wall) in items]
        try:
            self._db.executemany("INSERT OR IGNORE INTO samples VALUES (?,?,?,?,?,?,?)", rows)
            self._db.commit()
        except sqlite3.Error as exc:
            raise LedgerError(f"cannot write sample cache {self.path}: {exc}") from exc

    def count(self) -> int:
        return self._db.execute("SELECT COUNT(*) FROM samples").fetchone()[0]

    def close(self) -> None:
        self._db.close()
