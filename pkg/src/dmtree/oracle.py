"""Reference ordered map and operation log used to check the tree.

Deliberately shares no code with the tree: a dict for point lookups plus a
sorted key list for scans.
"""
from __future__ import annotations

import json
import threading
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from typing import Iterable, Iterator

OPS = ("lookup", "update", "insert", "remove", "scan")


class ReferenceMap:
    """Sequential ordered map with the same result vocabulary as the tree."""

    def __init__(self, items: Iterable[tuple[int, int]] = ()) -> None:
        self._d: dict[int, int] = {}
        for k, v in items:
            self._d[int(k)] = int(v)
        self._keys = sorted(self._d)

    def __len__(self) -> int:
        return len(self._d)

    def __contains__(self, key: int) -> bool:
        return key in self._d

    def lookup(self, key: int):
        return self._d.get(key)

    def update(self, key: int, value: int) -> str:
        if key not in self._d:
            return "not-found"
        self._d[key] = value
        return "updated"

    def insert(self, key: int, value: int) -> str:
        if key in self._d:
            self._d[key] = value
            return "updated"
        self._d[key] = value
        insort(self._keys, key)
        return "inserted"

    def remove(self, key: int) -> str:
        if key not in self._d:
            return "not-found"
        del self._d[key]
        i = bisect_left(self._keys, key)
        del self._keys[i]
        return "removed"

    def scan(self, start: int, count: int) -> list[tuple[int, int]]:
        i = bisect_left(self._keys, start)
        return [(k, self._d[k]) for k in self._keys[i:i + count]]

    def apply(self, op: str, key: int, value: int | None = None, count: int = 0):
        if op == "lookup":
            return self.lookup(key)
        if op == "update":
            return self.update(key, value)
        if op == "insert":
            return self.insert(key, value)
        if op == "remove":
            return self.remove(key)
        if op == "scan":
            return self.scan(key, count)
        raise ValueError(f"unknown operation {op!r}")

    def as_dict(self) -> dict[int, int]:
        return dict(self._d)


@dataclass
class LogEntry:
    seq: int
    thread: int
    op: str
    key: int
    value: int | None = None
    count: int = 0
    result: object = None

    def to_json(self) -> str:
        res = self.result
        if isinstance(res, list):
            res = [list(p) for p in res]
        return json.dumps({"seq": self.seq, "thread": self.thread, "op": self.op, "key": self.key,
                           "value": self.value, "count": self.count, "result": res})

    @classmethod
    def from_json(cls, line: str) -> "LogEntry":
        d = json.loads(line)
        res = d["result"]
        if d["op"] == "scan" and res is not None:
            res = [tuple(p) for p in res]
        return cls(d["seq"], d["thread"], d["op"], d["key"], d["value"], d["count"], res)


@dataclass
class OpLog:
    """Append-only record of operations and the results the tree returned."""
    entries: list[LogEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def record(self, thread: int, op: str, key: int, value=None, count: int = 0,
               result=None) -> None:
        if hasattr(result, "value") and isinstance(getattr(result, "value"), str):
            result = result.value  # enum results are logged by name
        with self._lock:
            self.entries.append(LogEntry(len(self.entries), thread, op, int(key),
                                         None if value is None else int(value), count, result))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[LogEntry]:
        return iter(self.entries)

    def dump(self, path: str) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(e.to_json() + "\n")

    @classmethod
    def load(cls, path: str) -> "OpLog":
        log = cls()
        with open(path) as fh:
            log.entries = [LogEntry.from_json(line) for line in fh if line.strip()]
        return log

    def by_thread(self) -> dict[int, list[LogEntry]]:
        out: dict[int, list[LogEntry]] = {}
        for e in self.entries:
            out.setdefault(e.thread, []).append(e)
        return out


@dataclass
class Divergence:
    seq: int
    op: str
    key: int
    expected: object
    got: object

    def __str__(self) -> str:
        return f"#{self.seq} {self.op}({self.key}): expected {self.expected!r}, got {self.got!r}"


def replay(log: OpLog, initial: Iterable[tuple[int, int]] = ()) -> tuple[list[Divergence], ReferenceMap]:
    """Replay a sequential log against the reference map and list result mismatches."""
    ref = ReferenceMap(initial)
    bad: list[Divergence] = []
    for e in sorted(log.entries, key=lambda e: e.seq):
        want = ref.apply(e.op, e.key, e.value, e.count)
        if want != e.result:
            bad.append(Divergence(e.seq, e.op, e.key, want, e.result))
    return bad, ref


def check_equivalence(log: OpLog, final_items: dict, initial: Iterable[tuple[int, int]] = (),
                      per_thread: bool = False) -> list[str]:
    """Compare a run against the reference.

    Sequential logs are replayed op by op.  With ``per_thread`` each thread's
    point operations are replayed on their own, which is exact when threads
    write disjoint keys; the final contents must then equal the union.
    """
    initial = list(initial)
    problems: list[str] = []
    if per_thread:
        for tid, entries in sorted(log.by_thread().items()):
            # scans cross into other threads' keys, so only point results are exact here
            own = OpLog([e for e in entries if e.op != "scan"])
            bad, _ = replay(own, initial)
            problems.extend(f"thread {tid}: {d}" for d in bad)
        ref = ReferenceMap(initial)
        for e in sorted(log.entries, key=lambda e: e.seq):
            if e.op in ("update", "insert", "remove"):
                ref.apply(e.op, e.key, e.value)
        expected = ref.as_dict()
    else:
        bad, ref = replay(log, initial)
        problems.extend(str(d) for d in bad)
        expected = ref.as_dict()
    final = {int(k): int(v) for k, v in final_items.items()}
    if final != expected:
        missing = expected.keys() - final.keys()
        extra = final.keys() - expected.keys()
        wrong = [k for k in expected.keys() & final.keys() if expected[k] != final[k]]
        problems.append(f"final contents differ: {len(missing)} missing, {len(extra)} extra, "
                        f"{len(wrong)} wrong values")
    return problems
