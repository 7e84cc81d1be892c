"""Simulated row-atomic NoSQL store.

Models the storage substrate the runtime assumes: strongly consistent
tables keyed by a hash + sort attribute pair, conditional single-row
updates, filtered scans with projection, and a hard cap on the encoded
size of a row. Every public operation executes in full at a single
scheduler yield point, so linearizability holds by construction; the
protocols built on top must not rely on any atomicity beyond that of
one operation on one row.

Attribute values are str, int, bool, bytes, or a one-level map of
str -> scalar. Absent attributes behave as "not exists" in conditions
and fail ordered comparisons.
"""

from __future__ import annotations

import base64
import bisect
import json
import random
from dataclasses import dataclass


class StoreError(Exception):
    pass


class UnknownTableError(StoreError):
    pass


class DuplicateTableError(StoreError):
    pass


class SchemaError(StoreError):
    pass


class CapacityError(StoreError):
    """An update would push the encoded row size past the table's cap."""


@dataclass(frozen=True)
class TableSchema:
    name: str
    hash_key: str
    sort_key: str
    row_capacity_bytes: int = 4096

    def validate(self):
        if self.hash_key == self.sort_key:
            raise SchemaError("hash key and sort key must differ: %r" % self.hash_key)
        if self.row_capacity_bytes <= 0:
            raise SchemaError("row capacity must be positive")


class C:
    """Condition expression constructors.

    A condition is a nested tuple tree evaluated against a row's
    attribute map (an absent row evaluates as the empty map). Paths
    address a top-level attribute ("LogSize") or one level into a map
    ("RecentWrites.k" addresses entry "k").
    """

    @staticmethod
    def true():
        return ("true",)

    @staticmethod
    def exists(path):
        return ("exists", path)

    @staticmethod
    def not_exists(path):
        return ("not_exists", path)

    @staticmethod
    def eq(path, lit):
        return ("eq", path, lit)

    @staticmethod
    def le(path, lit):
        return ("le", path, lit)

    @staticmethod
    def lt(path, lit):
        return ("lt", path, lit)

    @staticmethod
    def in_map(path, key):
        return ("in_map", path, key)

    @staticmethod
    def begins_with(path, prefix):
        return ("begins_with", path, prefix)

    @staticmethod
    def and_(*conds):
        return ("and",) + tuple(conds)

    @staticmethod
    def or_(*conds):
        return ("or",) + tuple(conds)

    @staticmethod
    def not_(cond):
        return ("not", cond)


class U:
    """Update expression constructors (a list of these forms an update)."""

    @staticmethod
    def set(path, lit):
        assert lit is not None, "store values cannot be None; use U.remove"
        return ("set", path, lit)

    @staticmethod
    def increment(path, n):
        return ("increment", path, n)

    @staticmethod
    def set_map_entry(path, key, lit):
        return ("set_map_entry", path, key, lit)

    @staticmethod
    def remove(path):
        return ("remove", path)


def _resolve(attrs, path):
    """Return (present, value) for a path against an attribute map."""
    if path in attrs:  # attribute names never contain dots
        return True, attrs[path]
    if "." in path:
        top, entry = path.split(".", 1)
        m = attrs.get(top)
        if isinstance(m, dict) and entry in m:
            return True, m[entry]
    return False, None


def eval_cond(cond, attrs) -> bool:
    op = cond[0]
    if op == "true":
        return True
    if op == "and":
        return all(eval_cond(c, attrs) for c in cond[1:])
    if op == "or":
        return any(eval_cond(c, attrs) for c in cond[1:])
    if op == "not":
        return not eval_cond(cond[1], attrs)
    if op == "exists":
        return _resolve(attrs, cond[1])[0]
    if op == "not_exists":
        return not _resolve(attrs, cond[1])[0]
    if op == "in_map":
        m = attrs.get(cond[1])
        return isinstance(m, dict) and cond[2] in m
    present, val = _resolve(attrs, cond[1])
    if op == "eq":
        return present and val == cond[2]
    if op == "le":
        return present and _comparable(val, cond[2]) and val <= cond[2]
    if op == "lt":
        return present and _comparable(val, cond[2]) and val < cond[2]
    if op == "begins_with":
        return present and isinstance(val, str) and val.startswith(cond[2])
    raise StoreError("unknown condition op %r" % (op,))


def _comparable(a, b):
    return isinstance(a, (int, float)) and isinstance(b, (int, float)) or (
        isinstance(a, str) and isinstance(b, str)
    )


def apply_update(attrs, update):
    """Return a new attribute map with the update actions applied.

    Nested maps touched by an action are copied, so the input map is
    never mutated. Increment of an absent attribute starts from 0.
    """
    out = dict(attrs)
    for action in update:
        op, path = action[0], action[1]
        if op == "set":
            if "." in path:
                top, entry = path.split(".", 1)
                m = dict(out.get(top) or {})
                m[entry] = action[2]
                out[top] = m
            else:
                out[path] = action[2]
        elif op == "increment":
            out[path] = out.get(path, 0) + action[2]
        elif op == "set_map_entry":
            m = dict(out.get(path) or {})
            m[action[2]] = action[3]
            out[path] = m
        elif op == "remove":
            if "." in path:
                top, entry = path.split(".", 1)
                m = out.get(top)
                if isinstance(m, dict) and entry in m:
                    m = dict(m)
                    del m[entry]
                    out[top] = m
            else:
                out.pop(path, None)
        else:
            raise StoreError("unknown update op %r" % (op,))
    return out


def encoded_size(attrs) -> int:
    """Deterministic byte-size estimate of a row (names + values + overhead)."""
    total = 0
    for name, val in attrs.items():
        total += len(name.encode()) + 2 + _value_size(val)
    return total


def _value_size(val) -> int:
    if isinstance(val, bool):
        return 1
    if isinstance(val, int):
        return 8
    if isinstance(val, str):
        return len(val.encode())
    if isinstance(val, bytes):
        return len(val)
    if isinstance(val, dict):
        return 2 + sum(len(str(k).encode()) + 2 + _value_size(v) for k, v in val.items())
    if val is None:
        return 1
    raise StoreError("unsupported attribute value type %r" % type(val).__name__)


def _copy_attrs(attrs):
    # one level of nesting is the contract; copy the nested maps
    return {k: (dict(v) if isinstance(v, dict) else v) for k, v in attrs.items()}


def _ordkey(v):
    if isinstance(v, bool):
        return (0, int(v), "")
    if isinstance(v, int):
        return (1, v, "")
    return (2, 0, str(v))


class _Table:
    __slots__ = ("schema", "buckets", "version", "_sorted_keys", "_sorted_version")

    def __init__(self, schema):
        self.schema = schema
        # hash key -> {sort key -> attrs}
        self.buckets: dict = {}
        self.version = 0          # bumped on row create/delete, not update
        self._sorted_keys = []
        self._sorted_version = -1

    def sorted_keys(self):
        if self._sorted_version != self.version:
            self._sorted_keys = sorted(
                ((hk, sk) for hk, bucket in self.buckets.items() for sk in bucket),
                key=lambda p: (_ordkey(p[0]), _ordkey(p[1])),
            )
            self._sorted_version = self.version
        return self._sorted_keys


class Store:
    """In-memory table collection with row-atomic conditional updates.

    The ``seed`` only affects the (unspecified, but run-stable) order in
    which raw scans return rows; no protocol may rely on scan order.
    """

    def __init__(self, seed: int = 0):
        self._tables: dict[str, _Table] = {}
        self._scan_rng = random.Random((seed * 2654435761 + 0x5CA7) & 0xFFFFFFFF)
        # instrumentation: write-log appends seen, for exactly-once checking
        self.logkey_appends: dict[str, tuple] = {}
        self.logkey_violations: list[dict] = []
        self.last_projection: list | None = None

    # -- table management ---------------------------------------------------

    def create_table(self, schema: TableSchema):
        schema.validate()
        if schema.name in self._tables:
            raise DuplicateTableError(schema.name)
        self._tables[schema.name] = _Table(schema)

    def has_table(self, name) -> bool:
        return name in self._tables

    def schema(self, name) -> TableSchema:
        return self._t(name).schema

    def _t(self, name) -> _Table:
        t = self._tables.get(name)
        if t is None:
            raise UnknownTableError(name)
        return t

    # -- row operations -----------------------------------------------------

    def raw_read(self, table, hash_key, sort_key):
        t = self._t(table)
        row = t.buckets.get(hash_key, {}).get(sort_key)
        return _copy_attrs(row) if row is not None else None

    def raw_cond_write(self, table, hash_key, sort_key, cond, update) -> bool:
        """Atomically evaluate ``cond`` against the current row and, if true,
        apply ``update`` (creating the row if absent). Returns whether the
        update was applied; a capacity overflow raises instead."""
        t = self._t(table)
        bucket = t.buckets.setdefault(hash_key, {})
        row = bucket.get(sort_key)
        current = row if row is not None else {}
        if not eval_cond(cond, current):
            if not bucket:
                del t.buckets[hash_key]
            return False
        base = current if row is not None else {
            t.schema.hash_key: hash_key,
            t.schema.sort_key: sort_key,
        }
        new_attrs = apply_update(base, update)
        if encoded_size(new_attrs) > t.schema.row_capacity_bytes:
            if not bucket:
                del t.buckets[hash_key]
            raise CapacityError("%s row (%r, %r)" % (table, hash_key, sort_key))
        if row is None:
            t.version += 1
        bucket[sort_key] = new_attrs
        self._note_appends(table, hash_key, sort_key, current, update)
        return True

    def raw_write(self, table, hash_key, sort_key, update):
        self.raw_cond_write(table, hash_key, sort_key, C.true(), update)

    def raw_scan(self, table, filt, projection=None):
        """All rows satisfying ``filt``, reduced to ``projection`` paths.

        The result reflects every write completed before this call (the
        whole scan is one linearization point here). Row order is
        deterministic for a given store seed but otherwise arbitrary.
        """
        t = self._t(table)
        self.last_projection = list(projection) if projection is not None else None
        rows = [r for r in self._candidate_rows(t, filt) if eval_cond(filt, r)]
        self._scan_rng.shuffle(rows)
        if projection is None:
            return [_copy_attrs(r) for r in rows]
        return [self._project(r, projection) for r in rows]

    def raw_remove(self, table, filt) -> int:
        t = self._t(table)
        victims = []
        hk_pin = self._hash_eq(filt, t.schema.hash_key)
        if hk_pin is not _NO_KEY:
            items = [(hk_pin, t.buckets[hk_pin])] if hk_pin in t.buckets else []
        else:
            items = list(t.buckets.items())
        for hk, bucket in items:
            for sk, row in bucket.items():
                if eval_cond(filt, row):
                    victims.append((hk, sk))
        for hk, sk in victims:
            del t.buckets[hk][sk]
            if not t.buckets[hk]:
                del t.buckets[hk]
        if victims:
            t.version += 1
        return len(victims)

    def paged_scan(self, table, filt, projection, cursor, page_limit):
        """Filtered scan in stable (hash, sort) order, ``page_limit`` rows at
        a time. Returns (rows, next_cursor); a None next_cursor means the
        scan is complete. A stale or malformed cursor restarts from the
        beginning, which is safe for at-least-once consumers."""
        if page_limit < 1:
            raise StoreError("page_limit must be >= 1")
        t = self._t(table)
        keys = t.sorted_keys()
        lo = 0
        if cursor is not None:
            try:
                start = (_ordkey(cursor[0]), _ordkey(cursor[1]))
                lo = bisect.bisect_right(
                    keys, start, key=lambda p: (_ordkey(p[0]), _ordkey(p[1])))
            except (TypeError, IndexError, KeyError):
                lo = 0
        out = []
        for i in range(lo, len(keys)):
            hk, sk = keys[i]
            row = t.buckets[hk][sk]
            if eval_cond(filt, row):
                out.append(self._project(row, projection) if projection is not None else _copy_attrs(row))
            if len(out) >= page_limit:
                return out, [hk, sk]
        return out, None

    # -- helpers ------------------------------------------------------------

    def _candidate_rows(self, t, filt):
        # fast path: a top-level hash-key equality pins one bucket
        hk = self._hash_eq(filt, t.schema.hash_key)
        if hk is not _NO_KEY:
            return list(t.buckets.get(hk, {}).values())
        return [row for bucket in t.buckets.values() for row in bucket.values()]

    def _hash_eq(self, cond, hash_attr):
        if cond[0] == "eq" and cond[1] == hash_attr:
            return cond[2]
        if cond[0] == "and":
            for c in cond[1:]:
                v = self._hash_eq(c, hash_attr)
                if v is not _NO_KEY:
                    return v
        return _NO_KEY

    @staticmethod
    def _project(row, projection):
        out = {}
        for path in projection:
            present, val = _resolve(row, path)
            if not present:
                continue
            if "." in path:
                top, entry = path.split(".", 1)
                out.setdefault(top, {})[entry] = val
            else:
                out[path] = dict(val) if isinstance(val, dict) else val
        return out

    def _note_appends(self, table, hk, sk, before, update):
        for action in update:
            if action[0] == "set_map_entry" and action[1] == "RecentWrites":
                key = action[2]
                where = (table, hk, sk)
                prior = self.logkey_appends.get(key)
                if prior is not None and isinstance(before.get("RecentWrites"), dict) and key in before["RecentWrites"]:
                    continue  # overwrite of an existing entry, not a new append
                if prior is not None:
                    self.logkey_violations.append(
                        {"logKey": key, "first": list(prior), "second": list(where)}
                    )
                else:
                    self.logkey_appends[key] = where

    # -- dump ---------------------------------------------------------------

    def dump_rows(self, tables=None):
        """All rows as JSON-ready dicts, sorted by (table, hash, sort)."""
        names = sorted(tables) if tables is not None else sorted(self._tables)
        out = []
        for name in names:
            t = self._tables.get(name)
            if t is None:
                continue
            keys = sorted(
                ((hk, sk) for hk, bucket in t.buckets.items() for sk in bucket),
                key=lambda p: (_ordkey(p[0]), _ordkey(p[1])),
            )
            for hk, sk in keys:
                out.append({"table": name, "row": _jsonable(t.buckets[hk][sk])})
        return out

    def dump_jsonl(self, tables=None) -> str:
        return "".join(
            json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n"
            for entry in self.dump_rows(tables)
        )


_NO_KEY = object()


def _jsonable(val):
    if isinstance(val, bytes):
        return {"__b64__": base64.b64encode(val).decode()}
    if isinstance(val, dict):
        return {k: _jsonable(v) for k, v in val.items()}
    return val
