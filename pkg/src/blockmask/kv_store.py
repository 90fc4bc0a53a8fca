"""Paged KV-cache bookkeeping with physical compaction.

Models the memory-management protocol only: token counts, page accounting and
the logical-to-physical translation a real engine would use to relocate cache
entries. No tensor payloads. Logical positions are fixed at append time and
never renumber; compaction removes spans expressed in that original
coordinate system, and the :class:`SpanMap` accumulates all removals so later
lookups stay O(log n).
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field

from .trace import ModelShape


class KvStoreError(Exception):
    pass


class CapacityError(KvStoreError):
    """Allocation would exceed the page pool; nothing was allocated."""

    def __init__(self, needed_pages: int, free_pages: int):
        super().__init__(
            f"pool exhausted: need {needed_pages} pages, {free_pages} free "
            f"(short {needed_pages - free_pages})"
        )
        self.needed_pages = needed_pages
        self.free_pages = free_pages


class SpanError(KvStoreError):
    """Compaction spans overlap, fall out of range, or were already removed."""


class KvLookupError(KvStoreError):
    pass


class PositionRemovedError(KvLookupError):
    """Logical position was compacted away."""


class PositionRangeError(KvLookupError):
    """Logical position was never appended."""


def bytes_per_token(shape: ModelShape) -> int:
    """Cache bytes per token: keys and values across all layers/KV heads."""
    return 2 * shape.n_layers * shape.n_kv_heads * shape.head_dim * shape.bytes_per_elem


class SpanMap:
    """Sorted disjoint kept spans over original logical positions.

    Physical index of a kept logical position p is p minus the number of
    removed positions before it; lookups are binary searches over span
    starts.
    """

    def __init__(self) -> None:
        self._spans: list[list[int]] = []  # [start, end), sorted, disjoint
        self._starts: list[int] = []
        self._kept_before: list[int] = []  # kept tokens before span i
        self._logical_size = 0

    @property
    def logical_size(self) -> int:
        return self._logical_size

    @property
    def kept_count(self) -> int:
        if not self._spans:
            return 0
        last = self._spans[-1]
        return self._kept_before[-1] + (last[1] - last[0])

    @property
    def kept_spans(self) -> list[tuple[int, int]]:
        return [(s, e) for s, e in self._spans]

    def extend(self, n: int) -> None:
        """Grow the logical space by n freshly kept positions."""
        if n < 0:
            raise ValueError("n must be >= 0")
        if n == 0:
            return
        old = self._logical_size
        self._logical_size += n
        if self._spans and self._spans[-1][1] == old:
            self._spans[-1][1] = self._logical_size
        else:
            self._kept_before.append(self.kept_count)
            self._spans.append([old, self._logical_size])
            self._starts.append(old)

    def _span_index(self, p: int) -> int | None:
        i = bisect_right(self._starts, p) - 1
        if i >= 0 and self._spans[i][0] <= p < self._spans[i][1]:
            return i
        return None

    def is_kept(self, p: int) -> bool:
        return self._span_index(p) is not None

    def to_physical(self, p: int) -> int:
        if p < 0 or p >= self._logical_size:
            raise PositionRangeError(f"position {p} outside [0, {self._logical_size})")
        i = self._span_index(p)
        if i is None:
            raise PositionRemovedError(f"position {p} was removed")
        return self._kept_before[i] + (p - self._spans[i][0])

    def validate_removal(self, spans: list[tuple[int, int]]) -> None:
        """Raise SpanError unless spans are sorted, disjoint, non-empty,
        in-range and entirely kept."""
        prev_end = -1
        for start, end in spans:
            if start >= end:
                raise SpanError(f"empty or inverted span [{start}, {end})")
            if start < prev_end:
                raise SpanError("spans must be sorted and disjoint")
            if start < 0 or end > self._logical_size:
                raise SpanError(
                    f"span [{start}, {end}) outside logical range [0, {self._logical_size})"
                )
            prev_end = end
            i = self._span_index(start)
            if i is None or end > self._spans[i][1]:
                raise SpanError(f"span [{start}, {end}) overlaps removed positions")

    def remove(self, spans: list[tuple[int, int]]) -> int:
        """Remove currently kept spans; returns the number of tokens removed.

        Spans must be sorted, disjoint, non-empty, inside the logical space,
        and entirely kept (re-removing is rejected, never double-counted).
        """
        self.validate_removal(spans)
        new_spans: list[list[int]] = []
        si = 0
        for s, e in self._spans:
            cursor = s
            while si < len(spans) and spans[si][0] < e:
                rs, re_ = spans[si]
                if cursor < rs:
                    new_spans.append([cursor, rs])
                cursor = re_
                si += 1
            if cursor < e:
                new_spans.append([cursor, e])
        self._spans = new_spans
        self._rebuild_index()
        return sum(e - s for s, e in spans)

    def _rebuild_index(self) -> None:
        self._starts = [s for s, _ in self._spans]
        self._kept_before = []
        acc = 0
        for s, e in self._spans:
            self._kept_before.append(acc)
            acc += e - s

    def dump(self) -> dict:
        return {"kept_spans": self.kept_spans, "logical_size": self._logical_size}


class PagePool:
    """Shared page budget across requests; None-sized pools are unbounded."""

    def __init__(self, total_pages: int | None = None):
        if total_pages is not None and total_pages < 1:
            raise ValueError("total_pages must be positive")
        self.total_pages = total_pages
        self.used_pages = 0
        self.peak_pages = 0

    @property
    def free_pages(self) -> int | None:
        if self.total_pages is None:
            return None
        return self.total_pages - self.used_pages

    def allocate(self, n: int) -> None:
        if self.total_pages is not None and self.used_pages + n > self.total_pages:
            raise CapacityError(n, self.total_pages - self.used_pages)
        self.used_pages += n
        self.peak_pages = max(self.peak_pages, self.used_pages)

    def release(self, n: int) -> None:
        if n > self.used_pages:
            raise KvStoreError(f"releasing {n} pages but only {self.used_pages} in use")
        self.used_pages -= n


@dataclass
class CompactReport:
    """Result of one physical compaction.

    copied_ranges are the minimal (src_physical, dst_physical, length) moves
    that densify surviving entries; freed_pages is the trailing page count
    returned to the pool.
    """

    removed_tokens: int
    freed_pages: int
    copied_ranges: list[tuple[int, int, int]] = field(default_factory=list)


class KvStore:
    """Per-request paged cache model: append tokens, compact spans, translate
    logical positions to dense physical slots."""

    def __init__(
        self,
        shape: ModelShape,
        page_size: int = 16,
        pool: PagePool | None = None,
    ):
        if page_size < 1:
            raise ValueError("page_size must be positive")
        self.shape = shape
        self.page_size = page_size
        self.pool = pool
        self.span_map = SpanMap()
        self._pages: list[int] = []
        self._reserved_pages = 0
        self._next_page_id = 0
        self.compaction_count = 0

    @property
    def used_tokens(self) -> int:
        return self.span_map.kept_count

    @property
    def page_count(self) -> int:
        return len(self._pages)

    @property
    def pages(self) -> list[int]:
        return list(self._pages)

    def _pages_needed(self, tokens: int) -> int:
        return -(-tokens // self.page_size)  # ceil

    def reserve_tokens(self, n: int) -> int:
        """Pre-allocate pool pages for n upcoming tokens; returns pages taken.

        Later appends consume the reservation before touching the pool, so an
        admitted request cannot lose its prompt pages to concurrent growth.
        """
        if n < 0:
            raise ValueError("n must be >= 0")
        target = self._pages_needed(self.used_tokens + n)
        grow = target - len(self._pages) - self._reserved_pages
        if grow > 0:
            if self.pool is not None:
                self.pool.allocate(grow)
            self._reserved_pages += grow
        return max(0, grow)

    def append(self, n: int) -> tuple[int, int]:
        """Append n tokens; returns (used_tokens, page_count).

        All-or-nothing against the pool: on CapacityError nothing changes.
        """
        if n < 0:
            raise ValueError("n must be >= 0")
        target = self._pages_needed(self.used_tokens + n)
        grow = target - len(self._pages)
        if grow > 0:
            from_reservation = min(grow, self._reserved_pages)
            from_pool = grow - from_reservation
            if from_pool > 0 and self.pool is not None:
                self.pool.allocate(from_pool)  # raises before any mutation
            self._reserved_pages -= from_reservation
        for _ in range(max(0, grow)):
            self._pages.append(self._next_page_id)
            self._next_page_id += 1
        self.span_map.extend(n)
        return self.used_tokens, self.page_count

    def compact(self, spans: list[tuple[int, int]]) -> CompactReport:
        """Physically remove spans (original logical coordinates).

        Copies are computed before the span map mutates, as the contiguous
        surviving runs that shift left past the first removed slot.
        """
        spans = sorted(spans)
        if not spans:
            return CompactReport(removed_tokens=0, freed_pages=0)

        used_before = self.used_tokens
        pages_before = self.page_count
        self.span_map.validate_removal(spans)
        # Physical intervals being vacated, in current physical coordinates.
        removed_phys = [
            (self.span_map.to_physical(s), self.span_map.to_physical(s) + (e - s))
            for s, e in spans
        ]
        removed = self.span_map.remove(spans)

        copied: list[tuple[int, int, int]] = []
        shift = 0
        for i, (rs, re) in enumerate(removed_phys):
            shift += re - rs
            run_start = re
            run_end = removed_phys[i + 1][0] if i + 1 < len(removed_phys) else used_before
            if run_end > run_start:
                copied.append((run_start, run_start - shift, run_end - run_start))

        target_pages = self._pages_needed(self.used_tokens)
        freed = pages_before - target_pages
        if freed > 0:
            del self._pages[target_pages:]
            if self.pool is not None:
                self.pool.release(freed)
        self.compaction_count += 1
        return CompactReport(removed_tokens=removed, freed_pages=freed, copied_ranges=copied)

    def release_all(self) -> int:
        """Free every page, including unused reservations."""
        freed = len(self._pages) + self._reserved_pages
        self._pages.clear()
        self._reserved_pages = 0
        if self.pool is not None and freed:
            self.pool.release(freed)
        return freed

    def logical_to_physical(self, p: int) -> int:
        return self.span_map.to_physical(p)

    def occupancy(self) -> tuple[int, int, int]:
        """(tokens, pages, bytes) currently cached."""
        tokens = self.used_tokens
        return tokens, self.page_count, tokens * bytes_per_token(self.shape)

    def dump(self) -> str:
        """Debug JSON of kept spans and the page list."""
        data = self.span_map.dump()
        data["pages"] = self._pages
        data["page_size"] = self.page_size
        return json.dumps(data)
