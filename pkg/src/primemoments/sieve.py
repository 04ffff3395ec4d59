"""Segmented sieve producing exact prime-power structure.

Each sieved block stores, for every integer n it covers, the prime p such
that n = p^j (and 0 when n is not a prime power).  The von Mangoldt weight
log p is always rederived from this exact integer code, never stored as a
rounded float, so every downstream accumulation is reproducible bit for bit.

Cache file layout (one file per segment): magic b"PKML", u32 version (1),
u64 base, u64 count, then count u32 prime-base codes, all little-endian.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_SEGMENT_LENGTH = 1 << 20
MIN_SEGMENT_LENGTH = 1 << 10

# codes are u32 prime bases, so a segment may not reach past 2^32 + 1
# (2^32 itself is fine: its base is 2)
_MAX_SIEVE_BOUND = (1 << 32) + 1

PKML_MAGIC = b"PKML"
PKML_VERSION = 1
_PKML_HEADER = struct.Struct("<4sIQQ")


class CoverageError(ValueError):
    """A computation needed sieve data beyond what the store may produce."""


@dataclass(frozen=True)
class SieveConfig:
    """Sieve run parameters; every segment in one run shares one length."""

    segment_length: int = DEFAULT_SEGMENT_LENGTH
    cache_dir: Path | None = None

    def __post_init__(self):
        if self.segment_length < MIN_SEGMENT_LENGTH:
            raise ValueError(
                f"segment_length must be >= {MIN_SEGMENT_LENGTH}, got {self.segment_length}"
            )
        if self.cache_dir is not None:
            object.__setattr__(self, "cache_dir", Path(self.cache_dir))


@dataclass(frozen=True)
class Segment:
    """A sieved block: codes[i] is the prime base of base+i, or 0.

    Invariants: codes[i] != 0 iff base+i is a prime power, in which case
    codes[i] is the unique prime dividing base+i.  The entry for n = 1 is 0.
    """

    base: int
    codes: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.codes.setflags(write=False)

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def end(self) -> int:
        """One past the last integer covered."""
        return self.base + len(self.codes)

    def lambda_values(self) -> np.ndarray:
        """Von Mangoldt weights log(codes) as float64, 0 where code is 0."""
        return lambda_from_codes(self.codes)


def lambda_from_codes(codes: np.ndarray) -> np.ndarray:
    lam = np.zeros(len(codes), dtype=np.float64)
    nz = codes != 0
    lam[nz] = np.log(codes[nz].astype(np.float64))
    return lam


def primes_upto(n: int) -> np.ndarray:
    """All primes <= n, via a plain Eratosthenes sieve (result not cached)."""
    if n < 2:
        return np.zeros(0, dtype=np.int64)
    flags = np.ones(n + 1, dtype=bool)
    flags[:2] = False
    for p in range(2, math.isqrt(n) + 1):
        if flags[p]:
            flags[p * p :: p] = False
    return np.nonzero(flags)[0].astype(np.int64)


_sieving_primes = np.zeros(0, dtype=np.int64)


def _sieving_primes_upto(n: int) -> np.ndarray:
    """Module-cached prime table, grown geometrically on demand."""
    global _sieving_primes
    if len(_sieving_primes) == 0 or _sieving_primes[-1] < n:
        target = max(n, 1 << 10)
        grown = 1 << max(int(math.ceil(math.log2(target))), 10)
        _sieving_primes = primes_upto(grown)
    cut = int(np.searchsorted(_sieving_primes, n, side="right"))
    return _sieving_primes[:cut]


def sieve_segment(base: int, length: int) -> Segment:
    """Sieve the block [base, base + length) into prime-power codes.

    Args:
        base: first integer covered, >= 1.
        length: number of integers covered, >= 1.

    Returns:
        Segment with codes[i] = p when base+i = p^j, else 0.  Deterministic:
        identical inputs produce bit-identical codes.
    """
    if length == 0:
        raise ValueError("empty range: length must be >= 1")
    if base < 1 or length < 0:
        raise ValueError(f"invalid range: base={base}, length={length}")
    hi = base + length  # exclusive
    if hi > _MAX_SIEVE_BOUND:
        raise ValueError(
            f"range end {hi} exceeds {_MAX_SIEVE_BOUND}: prime-power bases must fit in 32 bits"
        )

    root = math.isqrt(hi - 1)
    small = _sieving_primes_upto(root)

    composite = np.zeros(length, dtype=bool)
    for p in small:
        p = int(p)
        start = max(p * p, ((base + p - 1) // p) * p)
        if start < hi:
            composite[start - base :: p] = True

    codes = np.zeros(length, dtype=np.uint32)
    prime_idx = np.nonzero(~composite)[0]
    if base < 2:  # drop n = 1
        prime_idx = prime_idx[prime_idx >= 2 - base]
    codes[prime_idx] = (prime_idx + base).astype(np.uint32)

    # prime powers p^j, j >= 2, overwrite their composite marks
    for p in small:
        p = int(p)
        pk = p * p
        while pk < hi:
            if pk >= base:
                codes[pk - base] = p
            pk *= p

    return Segment(base=base, codes=codes)


def write_segment(path: Path, segment: Segment) -> None:
    """Write one segment cache file (PKML format)."""
    payload = segment.codes.astype("<u4").tobytes()
    header = _PKML_HEADER.pack(PKML_MAGIC, PKML_VERSION, segment.base, len(segment.codes))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)


def read_segment(path: Path) -> Segment:
    """Read a PKML segment file; raises ValueError on a corrupt file."""
    raw = path.read_bytes()
    if len(raw) < _PKML_HEADER.size:
        raise ValueError(f"corrupt segment file {path}: truncated header")
    magic, version, base, count = _PKML_HEADER.unpack_from(raw)
    if magic != PKML_MAGIC:
        raise ValueError(f"corrupt segment file {path}: bad magic {magic!r}")
    if version != PKML_VERSION:
        raise ValueError(f"corrupt segment file {path}: unsupported version {version}")
    expected = _PKML_HEADER.size + 4 * count
    if len(raw) != expected:
        raise ValueError(f"corrupt segment file {path}: expected {expected} bytes, got {len(raw)}")
    codes = np.frombuffer(raw, dtype="<u4", offset=_PKML_HEADER.size, count=count)
    return Segment(base=base, codes=codes.astype(np.uint32))


def segment_filename(base: int, length: int) -> str:
    return f"segment-{base:012d}-{length}.pkml"


class SegmentStore:
    """Aligned segments over [1, ...) with derived Lambda views and psi.

    Segments sit on a fixed grid (base 1 + i * segment_length) and are
    produced on demand, optionally round-tripping through a disk cache.
    With auto_extend=False the store only serves ranges already ensured,
    raising CoverageError beyond them.
    """

    def __init__(self, config: SieveConfig | None = None, *, auto_extend: bool = True):
        self.config = config or SieveConfig()
        self.auto_extend = auto_extend
        self._segments: dict[int, Segment] = {}
        self._psi_partials: dict[int, float] = {}

    @property
    def segment_length(self) -> int:
        return self.config.segment_length

    def _segment_base(self, index: int) -> int:
        return 1 + index * self.segment_length

    def segment(self, index: int) -> Segment:
        """The index-th grid segment, sieving or loading it if needed."""
        seg = self._segments.get(index)
        if seg is not None:
            return seg
        base = self._segment_base(index)
        seg = self._load_cached(base)
        if seg is None:
            seg = sieve_segment(base, self.segment_length)
            self._write_cached(seg)
        self._segments[index] = seg
        return seg

    def _cache_path(self, base: int) -> Path | None:
        if self.config.cache_dir is None:
            return None
        return self.config.cache_dir / segment_filename(base, self.segment_length)

    def _load_cached(self, base: int) -> Segment | None:
        path = self._cache_path(base)
        if path is None or not path.exists():
            return None
        try:
            seg = read_segment(path)
        except ValueError as exc:
            log.warning("%s; regenerating", exc)
            return None
        if seg.base != base or len(seg) != self.segment_length:
            log.warning("segment file %s does not match grid; regenerating", path)
            return None
        return seg

    def _write_cached(self, segment: Segment) -> None:
        path = self._cache_path(segment.base)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        if not path.exists():
            write_segment(path, segment)

    def ensure(self, limit: int, threads: int = 1) -> None:
        """Materialize coverage of [1, limit]; segments sieve in parallel."""
        count = self.segments_for(limit)
        missing = [i for i in range(count) if i not in self._segments]
        if not missing:
            return
        if threads > 1 and len(missing) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(self.segment, missing))
        else:
            for i in missing:
                self.segment(i)

    def segments_for(self, limit: int) -> int:
        """Number of grid segments needed to cover [1, limit]."""
        return (limit + self.segment_length - 1) // self.segment_length

    @property
    def covered(self) -> int:
        """Largest n with every segment up to n already materialized."""
        i = 0
        while i in self._segments:
            i += 1
        return self._segment_base(i) - 1

    def _check_coverage(self, hi: int) -> None:
        if not self.auto_extend and hi - 1 > self.covered:
            raise CoverageError(
                f"need sieve data up to {hi - 1} but store covers only [1, {self.covered}]"
            )

    def codes(self, lo: int, hi: int) -> np.ndarray:
        """Prime-base codes for n in [lo, hi), assembled across segments."""
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid range [{lo}, {hi})")
        self._check_coverage(hi)
        L = self.segment_length
        first = (lo - 1) // L
        last = (hi - 2) // L if hi > lo else first
        parts = []
        for i in range(first, last + 1):
            seg = self.segment(i)
            a = max(lo, seg.base) - seg.base
            b = min(hi, seg.end) - seg.base
            parts.append(seg.codes[a:b])
        if len(parts) == 1:
            return parts[0]
        return np.concatenate(parts)

    def lambda_upto(self, n: int) -> np.ndarray:
        """Array L of length n+1 with L[i] = Lambda(i); L[0] = 0."""
        lam = np.zeros(n + 1, dtype=np.float64)
        if n >= 1:
            lam[1:] = lambda_from_codes(self.codes(1, n + 1))
        return lam

    def _psi_partial(self, index: int) -> float:
        part = self._psi_partials.get(index)
        if part is None:
            part = math.fsum(self.segment(index).lambda_values())
            self._psi_partials[index] = part
        return part

    def psi(self, x: int | float) -> float:
        """Chebyshev psi(x) = sum of Lambda(n) for n <= x, compensated."""
        nx = math.floor(x)
        if nx < 2:
            return 0.0
        self._check_coverage(nx + 1)
        L = self.segment_length
        # segment i covers [1 + iL, (i+1)L]; fully included iff (i+1)L <= nx
        full = nx // L
        parts = [self._psi_partial(i) for i in range(full)]
        tail_lo = 1 + full * L
        if tail_lo <= nx:
            tail = self.segment(full).lambda_values()[: nx - tail_lo + 1]
            parts.append(math.fsum(tail))
        return math.fsum(parts)


_default_store: SegmentStore | None = None


def default_store() -> SegmentStore:
    """Shared process-wide store used by the convenience wrappers."""
    global _default_store
    if _default_store is None:
        _default_store = SegmentStore()
    return _default_store
