"""Binary BCH codec over GF(2^m), built from scratch.

Polynomials over GF(2) are held as Python ints: bit p of the int is the
coefficient of x^p, so addition is XOR and degree is ``bit_length() - 1``.
A length-n word maps to an int with bit index i of the word (``bits[0]``
first) stored at int position n-1-i; bit 0 of the word is therefore the
coefficient of x^(n-1).

Codewords are systematic: the first k bits carry data, the trailing n-k
bits carry parity, with parity = (data(x) * x^(n-k)) mod g(x).

Decoding runs syndrome computation, Berlekamp-Massey for the error
locator, and a Chien search for its roots. Up to t errors are corrected;
anything inconsistent is reported via ``ok=False`` rather than raised,
and in that case the raw received data bits come back so bit-level
accuracy stays computable downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np

# One fixed primitive polynomial per field order, x^m included.
# m=5 is x^5 + x^2 + 1. Published here so other implementations can match.
PRIMITIVE_POLYS = {
    5: 0b100101,
    6: 0b1000011,
    7: 0b10001001,
    8: 0b100011101,
    9: 0b1000010001,
    10: 0b10000001001,
    11: 0b100000000101,
    12: 0b1000001010011,
    13: 0b10000000011011,
    14: 0b100010001000011,
    15: 0b1000000000000011,
}

M_MIN, M_MAX = 5, 15


class BCHError(ValueError):
    """Invalid field/code construction or malformed codec input."""


def _poly_mul(a: int, b: int) -> int:
    """Multiply two GF(2) polynomials (carry-less product)."""
    out = 0
    while b:
        if b & 1:
            out ^= a
        a <<= 1
        b >>= 1
    return out


def _poly_mod(a: int, m: int) -> int:
    """Remainder of a(x) / m(x) over GF(2)."""
    dm = m.bit_length() - 1
    while a.bit_length() - 1 >= dm and a:
        a ^= m << (a.bit_length() - 1 - dm)
    return a


def _poly_divmod(a: int, m: int) -> tuple[int, int]:
    dm = m.bit_length() - 1
    q = 0
    while a.bit_length() - 1 >= dm and a:
        shift = a.bit_length() - 1 - dm
        a ^= m << shift
        q |= 1 << shift
    return q, a


@dataclass(frozen=True)
class GaloisField:
    """GF(2^m) with exp/log tables over the primitive element alpha = x."""

    m: int
    primitive_poly: int
    exp: tuple[int, ...] = field(repr=False)   # exp[i] = alpha^i, length 2*(2^m-1)
    log: tuple[int, ...] = field(repr=False)   # log[a] for a != 0

    @property
    def order(self) -> int:
        return (1 << self.m) - 1

    def mul(self, a: int, b: int) -> int:
        if a == 0 or b == 0:
            return 0
        return self.exp[self.log[a] + self.log[b]]

    def inv(self, a: int) -> int:
        if a == 0:
            raise ZeroDivisionError("no inverse of 0 in GF(2^m)")
        return self.exp[self.order - self.log[a]]

    def pow_alpha(self, e: int) -> int:
        """alpha^e with e reduced mod 2^m - 1 (e may be negative)."""
        return self.exp[e % self.order]


def gf_build(m: int, primitive_poly: int | None = None) -> GaloisField:
    """Build GF(2^m) tables from the fixed (or overridden) primitive polynomial."""
    if not M_MIN <= m <= M_MAX:
        raise BCHError(f"field order exponent m={m} outside [{M_MIN}, {M_MAX}]")
    poly = PRIMITIVE_POLYS[m] if primitive_poly is None else primitive_poly
    if poly.bit_length() - 1 != m:
        raise BCHError(f"primitive polynomial degree {poly.bit_length() - 1} != m={m}")
    n = (1 << m) - 1
    exp = [0] * (2 * n)
    log = [0] * (1 << m)
    a = 1
    for i in range(n):
        exp[i] = a
        if a == 1 and i > 0:
            # alpha's order divides i < 2^m - 1: the polynomial is not primitive.
            raise BCHError(f"polynomial {poly:#b} is not primitive for m={m}")
        log[a] = i
        a = _poly_mod(a << 1, poly)
    if a != 1:
        raise BCHError(f"polynomial {poly:#b} is not primitive for m={m}")
    for i in range(n, 2 * n):
        exp[i] = exp[i - n]
    return GaloisField(m=m, primitive_poly=poly, exp=tuple(exp), log=tuple(log))


def _cyclotomic_coset(i: int, n: int) -> tuple[int, ...]:
    coset = []
    j = i % n
    while j not in coset:
        coset.append(j)
        j = (2 * j) % n
    return tuple(sorted(coset))


def minimal_polynomial(gf: GaloisField, i: int) -> int:
    """Minimal polynomial of alpha^i over GF(2), as a GF(2)-coefficient int.

    Computed as prod_{j in coset(i)} (x - alpha^j) with coefficients in
    GF(2^m); the result must collapse to {0,1} coefficients.
    """
    coset = _cyclotomic_coset(i, gf.order)
    # poly as list of GF(2^m) coefficients, low degree first; start with 1
    coeffs = [1]
    for j in coset:
        root = gf.pow_alpha(j)
        nxt = [0] * (len(coeffs) + 1)
        for d, c in enumerate(coeffs):
            nxt[d + 1] ^= c                      # x * c
            nxt[d] ^= gf.mul(c, root)            # (-root) * c, minus == plus
        coeffs = nxt
    out = 0
    for d, c in enumerate(coeffs):
        if c not in (0, 1):
            raise BCHError("minimal polynomial has a coefficient outside GF(2)")
        out |= c << d
    return out


@dataclass(frozen=True)
class BCHParams:
    """Constructed code: n = 2^m - 1, generator = lcm of minimal polys of alpha^1..alpha^2t."""

    m: int
    n: int
    k: int
    t: int
    generator_poly: int
    field: GaloisField = field(repr=False)

    @property
    def designed_distance(self) -> int:
        return 2 * self.t + 1


def bch_build(m: int, t: int, primitive_poly: int | None = None) -> BCHParams:
    if t < 1:
        raise BCHError("error-correction capability t must be >= 1")
    gf = gf_build(m, primitive_poly)
    n = gf.order
    seen: set[tuple[int, ...]] = set()
    generator = 1
    for i in range(1, 2 * t + 1):
        coset = _cyclotomic_coset(i, n)
        if coset in seen:
            continue
        seen.add(coset)
        generator = _poly_mul(generator, minimal_polynomial(gf, i))
    k = n - (generator.bit_length() - 1)
    if k <= 0:
        raise BCHError(f"t={t} too large for n={n}: no data bits remain")
    return BCHParams(m=m, n=n, k=k, t=t, generator_poly=generator, field=gf)


def _bits_to_int(bits: np.ndarray, width: int) -> int:
    out = 0
    for i, b in enumerate(bits):
        if b:
            out |= 1 << (width - 1 - i)
    return out


def _int_to_bits(word: int, width: int) -> np.ndarray:
    return np.array([(word >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)


def bch_encode(params: BCHParams, data) -> np.ndarray:
    """Systematically encode up to k data bits (zero-padded to k) into n bits."""
    data = np.asarray(data, dtype=np.uint8).ravel()
    if data.size > params.k:
        raise BCHError(f"data length {data.size} exceeds k={params.k}")
    if not np.isin(data, (0, 1)).all():
        raise BCHError("data bits must be 0/1")
    padded = np.zeros(params.k, dtype=np.uint8)
    padded[: data.size] = data
    d = _bits_to_int(padded, params.k)
    parity = _poly_mod(d << (params.n - params.k), params.generator_poly)
    word = (d << (params.n - params.k)) | parity
    return _int_to_bits(word, params.n)


def _syndromes(params: BCHParams, word: int) -> list[int]:
    gf = params.field
    syn = [0] * (2 * params.t)
    w = word
    while w:
        lsb = w & -w
        p = lsb.bit_length() - 1          # set bit at exponent position p
        w ^= lsb
        for j in range(2 * params.t):
            syn[j] ^= gf.exp[((j + 1) * p) % params.n]
    return syn


def _berlekamp_massey(params: BCHParams, syn: list[int]) -> list[int]:
    """Error-locator Lambda(x) as GF(2^m) coefficients, low degree first."""
    gf = params.field
    C = [1] + [0] * (2 * params.t)
    B = [1] + [0] * (2 * params.t)
    L, shift, b = 0, 1, 1
    for i in range(2 * params.t):
        d = syn[i]
        for j in range(1, L + 1):
            d ^= gf.mul(C[j], syn[i - j])
        if d == 0:
            shift += 1
        elif 2 * L <= i:
            T = C[:]
            coef = gf.mul(d, gf.inv(b))
            for j in range(len(C) - shift):
                C[j + shift] ^= gf.mul(coef, B[j])
            L = i + 1 - L
            B = T
            b = d
            shift = 1
        else:
            coef = gf.mul(d, gf.inv(b))
            for j in range(len(C) - shift):
                C[j + shift] ^= gf.mul(coef, B[j])
            shift += 1
    return C[: L + 1]


def bch_decode(params: BCHParams, received) -> tuple[np.ndarray, int, bool]:
    """Decode n received bits to (data bits, #corrected, ok).

    ok=False means the error pattern was inconsistent (more than t errors
    detected); the returned data is then the raw systematic slice of the
    received word, uncorrected.
    """
    rec = np.asarray(received, dtype=np.uint8).ravel()
    if rec.size != params.n:
        raise BCHError(f"received length {rec.size} != n={params.n}")
    word = _bits_to_int(rec, params.n)
    raw_data = rec[: params.k].copy()

    syn = _syndromes(params, word)
    if not any(syn):
        return raw_data, 0, True

    locator = _berlekamp_massey(params, syn)
    n_err = len(locator) - 1
    if n_err > params.t:
        return raw_data, 0, False

    # Chien search: error at exponent position p iff Lambda(alpha^-p) = 0.
    gf = params.field
    positions = []
    for p in range(params.n):
        acc = 0
        for d, c in enumerate(locator):
            if c:
                acc ^= gf.mul(c, gf.pow_alpha(-p * d))
        if acc == 0:
            positions.append(p)
    if len(positions) != n_err:
        return raw_data, 0, False

    for p in positions:
        word ^= 1 << p
    if any(_syndromes(params, word)):
        return raw_data, 0, False
    bits = _int_to_bits(word, params.n)
    return bits[: params.k].copy(), n_err, True


def is_codeword(params: BCHParams, bits) -> bool:
    word = _bits_to_int(np.asarray(bits, dtype=np.uint8).ravel(), params.n)
    return _poly_mod(word, params.generator_poly) == 0


def parse_bitstring(text: str) -> np.ndarray:
    """Parse big-endian '0'/'1' text (or 0x-prefixed hex) into a bit array."""
    text = text.strip()
    if text.lower().startswith("0x"):
        hexpart = text[2:]
        width = 4 * len(hexpart)
        return _int_to_bits(int(hexpart, 16), width)
    if not text or any(c not in "01" for c in text):
        raise BCHError(f"not a bitstring: {text!r}")
    return np.array([int(c) for c in text], dtype=np.uint8)


def format_bitstring(bits) -> str:
    return "".join(str(int(b)) for b in np.asarray(bits).ravel())
