"""Random streams, posterior draws, permutations and scrambled Halton points."""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .pabn import _psd_factor
from .exceptions import DimensionMismatch

_PSD_FLOOR = 1e-8


# -- labelled RNG streams -----------------------------------------------------

_MASK64 = (1 << 64) - 1


@lru_cache(maxsize=256)
def _label_word(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


def _splitmix(h: int, x: int) -> int:
    h = (h ^ (x & _MASK64)) + 0x9E3779B97F4A7C15 & _MASK64
    h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    h = (h ^ (h >> 27)) * 0x94D049BB133111EB & _MASK64
    return h ^ (h >> 31)


def derive_key(seed: int, *labels) -> tuple[int, int]:
    """128-bit Philox key for a master seed and a tuple of int/str labels."""
    lo, hi = 0x243F6A8885A308D3, 0x13198A2E03707344
    for x in (seed,) + labels:
        x = _label_word(x) if isinstance(x, str) else int(x)
        lo = _splitmix(lo, x)
        hi = _splitmix(hi, x ^ 0xA4093822299F31D0)
    return lo, hi


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``.

    Philox is counter based, so distinct keys give independent streams and
    the same labels always reproduce the same draws on any platform.
    """
    return np.random.Generator(np.random.Philox(key=np.array(derive_key(seed, *labels), dtype=np.uint64)))


class StreamFactory:
    """Re-keys one Philox generator in place; much cheaper than a new one.

    The generator returned by :meth:`get` is only valid until the next call,
    so the factory must not be shared between concurrent consumers.
    """

    def __init__(self):
        self._bitgen = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        self._gen = np.random.Generator(self._bitgen)
        self._counter = np.zeros(4, dtype=np.uint64)
        self._key = np.zeros(2, dtype=np.uint64)
        self._state = {
            "bit_generator": "Philox",
            "state": {"counter": self._counter, "key": self._key},
            "buffer": np.zeros(4, dtype=np.uint64), "buffer_pos": 4, "has_uint32": 0, "uinteger": 0,
        }

    def get(self, seed: int, *labels) -> np.random.Generator:
        return self.substream(derive_key(seed, *labels), 0)

    def substream(self, key, index: int) -> np.random.Generator:
        """Generator for ``key`` with ``index`` in the upper counter words.

        Substreams of one key never overlap unless a single one consumes
        ``2**128`` blocks.  ``index`` must be below ``2**128``.
        """
        if not 0 <= index < 1 << 128:
            raise ValueError("substream index out of range")
        self._key[0], self._key[1] = key
        self._counter[:2] = 0
        self._counter[2] = index & _MASK64
        self._counter[3] = index >> 64
        self._bitgen.state = self._state
        return self._gen


# -- posterior over model parameters ------------------------------------------

_SLOT_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\[([0-9,\s]*)\])?\s*$")


def parse_slot(slot) -> tuple[str, tuple[int, ...]]:
    """``"beta_s[0,1,2]"`` -> ``("beta_s", (0, 1, 2))``; tuples pass through."""
    if isinstance(slot, (tuple, list)):
        name, idx = slot
        return str(name), tuple(int(i) for i in idx)
    m = _SLOT_RE.match(slot)
    if not m:
        raise ValueError(f"bad parameter slot {slot!r}")
    idx = tuple(int(p) for p in m.group(2).split(",") if p.strip()) if m.group(2) else ()
    return m.group(1), idx


def format_slot(slot: tuple[str, tuple[int, ...]]) -> str:
    name, idx = slot
    return name if not idx else f"{name}[{','.join(str(i) for i in idx)}]"


def project_psd(cov: np.ndarray, floor: float = _PSD_FLOOR) -> np.ndarray:
    """Nearest-by-eigenvalue-clamp PSD matrix."""
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() >= floor:
        return sym
    out = (vecs * np.clip(vals, floor, None)) @ vecs.T
    return 0.5 * (out + out.T)


@dataclass(eq=False)
class ParameterPosterior:
    """Gaussian posterior over a subset of parameter slots.

    Parameters
    ----------
    base : parameter object
        Supplies the fixed slots; must offer ``with_updates(**fields)``.
    slots : sequence of str or (name, index)
        Random slots, e.g. ``"beta_s[0,1,2]"``. Order matches ``mean``.
    mean, cov : array_like
        Posterior mean and covariance over the flat random-slot vector.
    """

    base: object
    slots: Sequence = ()
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.slots = [parse_slot(s) for s in self.slots]
        d_w = len(self.slots)
        if self.mean is None:
            self.mean = self.extract(self.base)
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.zeros((d_w, d_w)) if self.cov is None else np.asarray(self.cov, dtype=float).reshape(d_w, d_w)
        if self.mean.size != d_w:
            raise DimensionMismatch(f"posterior mean has {self.mean.size} entries for {d_w} slots")
        if len(set(self.slots)) != d_w:
            raise ValueError("duplicate posterior slots")
        self._factor = _psd_factor(0.5 * (self.cov + self.cov.T))

    @property
    def dim(self) -> int:
        return len(self.slots)

    @property
    def degenerate(self) -> bool:
        return not np.any(self._factor)

    def extract(self, params) -> np.ndarray:
        return np.array([np.asarray(getattr(params, name))[idx] for name, idx in self.slots], dtype=float)

    def embed(self, vector) -> object:
        vector = np.asarray(vector, dtype=float).reshape(-1)
        if vector.size != self.dim:
            raise DimensionMismatch(f"expected {self.dim} values, got {vector.size}")
        if not self.dim:
            return self.base
        updates: dict[str, np.ndarray] = {}
        for (name, idx), value in zip(self.slots, vector):
            arr = updates.get(name)
            if arr is None:
                arr = updates[name] = np.array(getattr(self.base, name), dtype=float, copy=True)
            arr[idx] = value
            if name == "cov" and len(idx) == 2:
                arr[idx[::-1]] = value
        if "cov" in updates:
            updates["cov"] = project_psd(updates["cov"])
        for name, arr in updates.items():
            if arr.ndim == 0:
                updates[name] = float(arr)
        return self.base.with_updates(**updates)

    def from_normals(self, z) -> object:
        """Parameter draw for standard normal coordinates ``z``."""
        return self.embed(self.mean + self._factor @ np.asarray(z, dtype=float))

    def sample(self, rng: np.random.Generator) -> object:
        if self.degenerate:
            return self.base if np.array_equal(self.mean, self.extract(self.base)) else self.embed(self.mean)
        return self.from_normals(rng.standard_normal(self.dim))

    def sample_vector(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.mean + rng.standard_normal((size, self.dim)) @ self._factor.T


def sample_posterior(post: ParameterPosterior, rng: np.random.Generator):
    return post.sample(rng)


# -- permutations ---------------------------------------------------------------

def sample_permutation(n: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform random ordering of ``0..n-1`` (Fisher-Yates)."""
    if n < 2:
        raise ValueError("permutations need at least two inputs")
    return tuple(int(i) for i in rng.permutation(n))


def lehmer_permutation(u: Sequence[float], n: int) -> tuple[int, ...]:
    """Map ``n - 1`` uniforms to a permutation by successive selection.

    Step ``k`` takes element ``floor(u_k * (n - k + 1))`` of the items not yet
    chosen; the last item is forced.
    """
    u = np.asarray(u, dtype=float)
    if u.size != n - 1:
        raise DimensionMismatch(f"need {n - 1} coordinates for a permutation of {n}, got {u.size}")
    remaining = list(range(n))
    out = []
    for k, uk in enumerate(u):
        size = n - k
        out.append(remaining.pop(min(int(uk * size), size - 1)))
    out.append(remaining[0])
    return tuple(out)


# -- Halton -------------------------------------------------------------------

def first_primes(k: int) -> list[int]:
    primes: list[int] = []
    cand = 2
    while len(primes) < k:
        if all(cand % p for p in primes if p * p <= cand):
            primes.append(cand)
        cand += 1
    return primes


def radical_inverse(index, base: int, perms: np.ndarray | None = None) -> np.ndarray:
    """Van der Corput radical inverse of ``index`` in ``base``.

    With ``perms`` (shape ``(n_digits, base)``) digit ``k`` is replaced by
    ``perms[k, digit]`` for every position, including the leading zeros.
    """
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros(index.shape)
    n_digits = perms.shape[0] if perms is not None else 64
    scale = 1.0 / base
    rest = index.copy()
    for k in range(n_digits):
        if perms is None and not rest.any():
            break
        digit = rest % base
        if perms is not None:
            digit = perms[k, digit]
        out += digit * scale
        rest //= base
        scale /= base
    return out


class HaltonStream:
    """Sequential (optionally scrambled) Halton points in ``(0, 1)^dimension``.

    Scrambling applies an independent random digit permutation per dimension
    and digit position, keyed by ``seed``; it keeps the low-discrepancy
    structure and makes every point marginally uniform.
    """

    def __init__(self, dimension: int, seed: int = 0, scramble: bool = True, start: int = 1):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.seed = seed
        self.scramble = scramble
        self.counter = start
        self.bases = first_primes(dimension)
        self._perms = None
        if scramble:
            rng = stream(seed, "halton-scramble")
            self._perms = []
            for b in self.bases:
                n_digits = int(math.ceil(53 * math.log(2) / math.log(b))) + 1
                self._perms.append(np.array([rng.permutation(b) for _ in range(n_digits)]))

    def points(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n)
        out = np.empty((n, self.dimension))
        for d, b in enumerate(self.bases):
            out[:, d] = radical_inverse(idx, b, None if self._perms is None else self._perms[d])
        self.counter += n
        eps = 2.0 ** -53
        return np.clip(out, eps, 1.0 - eps)

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        return self.points(1)[0]


def halton_point(stream_: HaltonStream) -> np.ndarray:
    return next(stream_)


def qmc_dimension(posterior: ParameterPosterior, n_inputs: int) -> int:
    return posterior.dim + n_inputs - 1


def qmc_to_sample(point, posterior: ParameterPosterior, n_inputs: int):
    """Split a QMC point into a parameter draw and a permutation."""
    point = np.asarray(point, dtype=float)
    if point.size != qmc_dimension(posterior, n_inputs):
        raise DimensionMismatch(f"point dimension {point.size} != {qmc_dimension(posterior, n_inputs)}")
    d_w = posterior.dim
    w = posterior.from_normals(ndtri(point[:d_w])) if d_w and not posterior.degenerate else posterior.sample(None)
    return w, lehmer_permutation(point[d_w:], n_inputs)
