"""Rating-data ingestion: event logs and dense rating grids into one sparse matrix form.

Two source layouts are supported: MovieLens-style ``user::item::rating::timestamp``
event logs and Jester-style delimiter-separated rating grids with a 99.0
"not rated" sentinel. Both are normalized onto a common [1, 5] scale so the
clustering and quality code paths are shared.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np
from scipy import sparse

from .errors import EmptyResultError, ParseError, RatingRangeError

JESTER_SENTINEL = 99.0
_SENTINEL_TOL = 1e-9

TARGET_MIN = 1.0
TARGET_MAX = 5.0


@dataclass(frozen=True)
class NormalizationScheme:
    """Affine map from a source rating range onto the common [1, 5] scale."""

    kind: str
    source_min: float
    source_max: float

    def normalize(self, raw: float) -> float:
        if not (self.source_min <= raw <= self.source_max):
            raise RatingRangeError(
                f"rating {raw!r} outside [{self.source_min}, {self.source_max}] "
                f"for scheme {self.kind}"
            )
        span = self.source_max - self.source_min
        return (raw - self.source_min) / span * (TARGET_MAX - TARGET_MIN) + TARGET_MIN


IDENTITY_1_TO_5 = NormalizationScheme("identity_1_to_5", 1.0, 5.0)
JESTER_AFFINE = NormalizationScheme("jester_affine", -10.0, 10.0)


def normalize_rating(raw: float, scheme: NormalizationScheme) -> float:
    """Map a raw rating into [1, 5]. Strictly monotone; raises RatingRangeError outside the source range."""
    return scheme.normalize(raw)


@dataclass(frozen=True)
class RatingEvent:
    """One explicit rating with the value already normalized into [1, 5]."""

    user_id: int
    item_id: int
    value: float
    timestamp: int | None = None

    def __post_init__(self):
        if self.user_id < 0 or self.item_id < 0:
            raise ValueError(f"negative id in {self!r}")
        if not (TARGET_MIN <= self.value <= TARGET_MAX):
            raise RatingRangeError(f"normalized value {self.value!r} outside [1, 5]")


@dataclass(frozen=True)
class PrefixOrdering:
    """Deterministic total order over one user's ratings; ties break by ascending item."""

    kind: str
    tie_break: str = "item_ascending"

    def __post_init__(self):
        if self.kind not in ("by_timestamp", "by_item_index"):
            raise ValueError(f"unknown ordering kind {self.kind!r}")
        if self.tie_break != "item_ascending":
            raise ValueError(f"unsupported tie break {self.tie_break!r}")


BY_TIMESTAMP = PrefixOrdering("by_timestamp")
BY_ITEM_INDEX = PrefixOrdering("by_item_index")


@dataclass(frozen=True, eq=False)
class RatingMatrix:
    """Sparse users x items rating matrix in CSR layout.

    ``indices``/``values`` hold the per-user rows back to back, delimited by
    ``indptr``; item indices are strictly increasing within a row, so absence
    of an index is the rated-mask. ``user_ids``/``item_ids`` map row/column
    indices back to the original identifiers. ``timestamps`` is aligned with
    ``values`` when the source carried per-rating timestamps, else None.

    Matrices built by the parsers hold values in [1, 5]; the structure itself
    permits arbitrary finite values so toy inputs can be assembled directly.
    """

    n_users: int
    n_items: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    scheme: NormalizationScheme
    timestamps: np.ndarray | None = None

    @property
    def n_ratings(self) -> int:
        return int(self.values.shape[0])

    def row_length(self, user: int) -> int:
        return int(self.indptr[user + 1] - self.indptr[user])

    def row(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        """Sparse row of one user as (item_indices, values) views."""
        if not (0 <= user < self.n_users):
            raise ValueError(f"user index {user} out of range [0, {self.n_users})")
        lo, hi = self.indptr[user], self.indptr[user + 1]
        return self.indices[lo:hi], self.values[lo:hi]

    def row_timestamps(self, user: int) -> np.ndarray | None:
        if self.timestamps is None:
            return None
        lo, hi = self.indptr[user], self.indptr[user + 1]
        return self.timestamps[lo:hi]

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_csr(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(
            (self.values, self.indices, self.indptr), shape=(self.n_users, self.n_items)
        )

    def content_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.indptr, self.indices, self.values):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def validate(self) -> None:
        """Check structural invariants; raises ValueError on violation."""
        if self.indptr.shape != (self.n_users + 1,):
            raise ValueError("indptr length does not match n_users")
        if self.indptr[0] != 0 or self.indptr[-1] != len(self.values):
            raise ValueError("indptr does not span the value array")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values length mismatch")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.n_items):
            raise ValueError("item index out of range")
        if self.timestamps is not None and len(self.timestamps) != len(self.values):
            raise ValueError("timestamps and values length mismatch")
        if len(self.user_ids) != self.n_users or len(self.item_ids) != self.n_items:
            raise ValueError("id map length mismatch")
        # Strict increase within every row (also rules out duplicate items).
        if len(self.indices) > 1:
            nondecreasing_breaks = np.flatnonzero(np.diff(self.indices) <= 0) + 1
            row_starts = self.indptr[1:-1]
            if not np.all(np.isin(nondecreasing_breaks, row_starts)):
                raise ValueError("item indices must be strictly increasing within each row")
        if len(self.values) and not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite rating value")

    @classmethod
    def from_rows(
        cls,
        rows: Iterable[Iterable[tuple[int, float]]],
        n_items: int,
        scheme: NormalizationScheme = IDENTITY_1_TO_5,
        user_ids: Iterable[int] | None = None,
        item_ids: Iterable[int] | None = None,
    ) -> "RatingMatrix":
        """Assemble a matrix from per-user (item_index, value) lists, mainly for tests and toys."""
        rows = [sorted(r) for r in rows]
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        idx_parts, val_parts = [], []
        for u, r in enumerate(rows):
            indptr[u + 1] = indptr[u] + len(r)
            idx_parts.extend(i for i, _ in r)
            val_parts.extend(v for _, v in r)
        m = cls(
            n_users=len(rows),
            n_items=n_items,
            indptr=indptr,
            indices=np.asarray(idx_parts, dtype=np.int32),
            values=np.asarray(val_parts, dtype=np.float64),
            user_ids=np.asarray(
                list(user_ids) if user_ids is not None else range(len(rows)), dtype=np.int64
            ),
            item_ids=np.asarray(
                list(item_ids) if item_ids is not None else range(n_items), dtype=np.int64
            ),
            scheme=scheme,
        )
        m.validate()
        return m


def _iter_lines(source: str | Path | IO) -> Iterator[str]:
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            yield from fh
        return
    for line in source:
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        yield line


def parse_movielens(source: str | Path | IO) -> list[RatingEvent]:
    """Parse ``user::item::rating::timestamp`` lines into rating events.

    Ratings must lie in [1, 5] and pass through unchanged. Blank lines are
    ignored; anything else malformed raises ParseError with its line number.
    """
    events: list[RatingEvent] = []
    for line_no, line in enumerate(_iter_lines(source), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(f"expected 4 '::'-separated fields, got {len(parts)}", line_no)
        try:
            user = int(parts[0])
            item = int(parts[1])
            raw = float(parts[2])
            ts = int(parts[3])
        except ValueError:
            raise ParseError(f"unparseable field in {line!r}", line_no) from None
        if user < 0 or item < 0:
            raise ParseError(f"negative id in {line!r}", line_no)
        try:
            value = normalize_rating(raw, IDENTITY_1_TO_5)
        except RatingRangeError as e:
            raise RatingRangeError(str(e), line_no) from None
        events.append(RatingEvent(user, item, value, ts))
    return events


def _detect_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def parse_jester(
    source: str | Path | IO,
    *,
    delimiter: str | None = None,
    strict_counts: bool = False,
) -> RatingMatrix:
    """Parse a Jester-style rating grid into a sparse matrix.

    Every row carries a declared rating count followed by 100 rating cells
    (an optional leading user-id field is also accepted); cells equal to the
    99.0 sentinel are unrated and omitted from the sparse row, the rest are
    mapped from [-10, 10] onto [1, 5]. A declared count that disagrees with
    the observed count warns, or raises when ``strict_counts`` is set.
    """
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    user_ids: list[int] = []
    expected_fields: int | None = None

    for line_no, line in enumerate(_iter_lines(source), start=1):
        line = line.strip()
        if not line:
            continue
        if delimiter is None:
            delimiter = _detect_delimiter(line)
        fields = [f.strip() for f in line.split(delimiter)]
        if expected_fields is None:
            if len(fields) not in (101, 102):
                raise ParseError(
                    f"expected 101 or 102 fields (count [+ user id] + 100 ratings), "
                    f"got {len(fields)}",
                    line_no,
                )
            expected_fields = len(fields)
        if len(fields) != expected_fields:
            raise ParseError(
                f"expected {expected_fields} fields, got {len(fields)}", line_no
            )
        try:
            if expected_fields == 102:
                user_id = int(float(fields[0]))
                declared = int(float(fields[1]))
                cells = fields[2:]
            else:
                user_id = len(user_ids)
                declared = int(float(fields[0]))
                cells = fields[1:]
            raw_cells = [float(c) for c in cells]
        except ValueError:
            raise ParseError(f"unparseable numeric field", line_no) from None

        row_start = len(values)
        for item_idx, raw in enumerate(raw_cells):
            if abs(raw - JESTER_SENTINEL) < _SENTINEL_TOL:
                continue
            try:
                values.append(normalize_rating(raw, JESTER_AFFINE))
            except RatingRangeError as e:
                raise RatingRangeError(str(e), line_no) from None
            indices.append(item_idx)
        observed = len(values) - row_start
        if observed != declared:
            msg = f"line {line_no}: declared {declared} ratings but found {observed}"
            if strict_counts:
                raise ParseError(f"declared {declared} ratings but found {observed}", line_no)
            warnings.warn(msg, stacklevel=2)
        user_ids.append(user_id)
        indptr.append(len(values))

    m = RatingMatrix(
        n_users=len(user_ids),
        n_items=100,
        indptr=np.asarray(indptr, dtype=np.int64),
        indices=np.asarray(indices, dtype=np.int32),
        values=np.asarray(values, dtype=np.float64),
        user_ids=np.asarray(user_ids, dtype=np.int64),
        item_ids=np.arange(100, dtype=np.int64),
        scheme=JESTER_AFFINE,
    )
    m.validate()
    return m


def build_matrix(
    events: Iterable[RatingEvent],
    dedup: str = "keep_last",
    scheme: NormalizationScheme = IDENTITY_1_TO_5,
) -> RatingMatrix:
    """Assemble normalized events into a RatingMatrix.

    Duplicate (user, item) pairs are resolved by ``dedup``: "keep_last"
    (default, the later event wins), "keep_first", or "error".
    """
    if dedup not in ("keep_last", "keep_first", "error"):
        raise ValueError(f"unknown dedup policy {dedup!r}")
    events = list(events)
    if not events:
        return RatingMatrix(
            n_users=0,
            n_items=0,
            indptr=np.zeros(1, dtype=np.int64),
            indices=np.zeros(0, dtype=np.int32),
            values=np.zeros(0, dtype=np.float64),
            user_ids=np.zeros(0, dtype=np.int64),
            item_ids=np.zeros(0, dtype=np.int64),
            scheme=scheme,
        )

    users = np.asarray([e.user_id for e in events], dtype=np.int64)
    items = np.asarray([e.item_id for e in events], dtype=np.int64)
    vals = np.asarray([e.value for e in events], dtype=np.float64)
    has_ts = [e.timestamp is not None for e in events]
    if all(has_ts):
        tstamps = np.asarray([e.timestamp for e in events], dtype=np.int64)
    elif not any(has_ts):
        tstamps = None
    else:
        raise ValueError("events must either all carry timestamps or none")

    user_ids, u_idx = np.unique(users, return_inverse=True)
    item_ids, i_idx = np.unique(items, return_inverse=True)

    # Stable sort by (user, item, arrival); the arrival key makes the dedup
    # policies a pure slice of each duplicate run.
    arrival = np.arange(len(events))
    order = np.lexsort((arrival, i_idx, u_idx))
    u_idx, i_idx, vals = u_idx[order], i_idx[order], vals[order]
    if tstamps is not None:
        tstamps = tstamps[order]

    new_pair = np.ones(len(events), dtype=bool)
    new_pair[1:] = (np.diff(u_idx) != 0) | (np.diff(i_idx) != 0)
    if dedup == "error" and not new_pair.all():
        dup = np.flatnonzero(~new_pair)[0]
        raise ValueError(
            f"duplicate rating for user {user_ids[u_idx[dup]]}, item {item_ids[i_idx[dup]]}"
        )
    if dedup == "keep_first":
        keep = new_pair
    else:
        keep = np.ones(len(events), dtype=bool)
        keep[:-1] = new_pair[1:]  # last entry of each run
    u_idx, i_idx, vals = u_idx[keep], i_idx[keep], vals[keep]
    if tstamps is not None:
        tstamps = tstamps[keep]

    counts = np.bincount(u_idx, minlength=len(user_ids))
    indptr = np.zeros(len(user_ids) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])

    m = RatingMatrix(
        n_users=len(user_ids),
        n_items=len(item_ids),
        indptr=indptr,
        indices=i_idx.astype(np.int32),
        values=vals,
        user_ids=user_ids,
        item_ids=item_ids,
        scheme=scheme,
        timestamps=tstamps,
    )
    m.validate()
    return m


def filter_min_ratings(m: RatingMatrix, min_count: int) -> RatingMatrix:
    """Keep only users with at least ``min_count`` ratings; item space unchanged."""
    if min_count < 0:
        raise ValueError("min_count must be >= 0")
    lengths = m.row_lengths()
    keep = np.flatnonzero(lengths >= min_count)
    if len(keep) == 0:
        raise EmptyResultError(f"no user has >= {min_count} ratings")
    if len(keep) == m.n_users:
        return m

    take = np.concatenate(
        [np.arange(m.indptr[u], m.indptr[u + 1]) for u in keep]
    ) if len(m.values) else np.zeros(0, dtype=np.int64)
    indptr = np.zeros(len(keep) + 1, dtype=np.int64)
    np.cumsum(lengths[keep], out=indptr[1:])
    out = RatingMatrix(
        n_users=len(keep),
        n_items=m.n_items,
        indptr=indptr,
        indices=m.indices[take],
        values=m.values[take],
        user_ids=m.user_ids[keep],
        item_ids=m.item_ids,
        scheme=m.scheme,
        timestamps=None if m.timestamps is None else m.timestamps[take],
    )
    out.validate()
    return out


def sample_users(
    m: RatingMatrix, n: int, seed: int, among: list[int] | None = None
) -> list[int]:
    """Draw n distinct user indices uniformly without replacement, reproducibly.

    ``among`` restricts the population to the given user indices (e.g. the
    minimum-history-eligible subset) while keeping indices in m's space.
    """
    population = np.asarray(among if among is not None else np.arange(m.n_users))
    if n > len(population):
        raise ValueError(f"cannot sample {n} users from {len(population)}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(population), size=n, replace=False)
    return [int(population[i]) for i in picked]


def prefix(
    m: RatingMatrix,
    user: int,
    t: int,
    ordering: PrefixOrdering = BY_ITEM_INDEX,
    events: list[RatingEvent] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """First min(t, history) ratings of a user under ``ordering``, as an item-sorted sparse row.

    ``by_timestamp`` needs per-rating timestamps: either stored on the matrix
    or supplied through ``events``. Prefixes are nested: the result for t1 is
    a subset of the result for any t2 >= t1.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    idx, vals = m.row(user)
    take = min(t, len(idx))

    if ordering.kind == "by_item_index":
        sel = np.arange(take)
    else:
        ts = m.row_timestamps(user)
        if events is not None:
            by_item = {
                e.item_id: e.timestamp
                for e in events
                if e.user_id == int(m.user_ids[user]) and e.timestamp is not None
            }
            try:
                ts = np.asarray([by_item[int(m.item_ids[i])] for i in idx], dtype=np.int64)
            except KeyError as e:
                raise ValueError(f"no timestamp for item id {e.args[0]}") from None
        if ts is None:
            raise ValueError("by_timestamp ordering requires timestamps")
        # Tie-break on item index; np.lexsort's last key is primary.
        order = np.lexsort((idx, ts))
        sel = np.sort(order[:take])
    return idx[sel].copy(), vals[sel].copy()


def export_canonical_csv(m: RatingMatrix, dest: str | Path | IO[str]) -> None:
    """Write the canonical ``user_id,item_id,value,timestamp`` export (empty timestamp if absent)."""

    def _write(fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "value", "timestamp"])
        for u in range(m.n_users):
            lo, hi = m.indptr[u], m.indptr[u + 1]
            uid = m.user_ids[u]
            for p in range(lo, hi):
                ts = "" if m.timestamps is None else int(m.timestamps[p])
                w.writerow([uid, m.item_ids[m.indices[p]], repr(float(m.values[p])), ts])

    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _write(fh)
    else:
        _write(dest)
