"""
Bit-level primitives shared by PBCH, PDCCH and the RAR transport chain.

Conventions used throughout:
  - bits are numpy uint8 arrays of 0/1
  - soft bits are float64 log-likelihood ratios, positive means 0 is more likely
  - multi-stream codewords are laid out stream-major: [d0 | d1 | d2]
"""
import math
from functools import lru_cache

import numpy as np

from config import data_table

GOLD_FAST_FORWARD = 1600

# Viterbi look-ahead on each side of a tail-biting block
WRAP_DEPTH = 48

TURBO_MAX_ITERATIONS = 8


class CodingError(ValueError):
    """Bad codec input: lengths, unsupported block sizes, odd symbol counts."""


def as_bits(bits) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint8).reshape(-1)


def int_to_bits(value: int, width: int) -> np.ndarray:
    """Big-endian bit expansion of `value` into `width` bits."""
    return ((int(value) >> np.arange(width - 1, -1, -1)) & 1).astype(np.uint8)


def bits_to_int(bits) -> int:
    value = 0
    for b in as_bits(bits):
        value = (value << 1) | int(b)
    return value


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8))


def bits_to_bytes(bits) -> bytes:
    bits = as_bits(bits)
    if len(bits) % 8:
        raise CodingError(f"Bit count {len(bits)} is not a whole number of bytes")
    return np.packbits(bits).tobytes()


def hard_decision(soft) -> np.ndarray:
    return (np.asarray(soft) < 0).astype(np.uint8)


# --- tables -----------------------------------------------------------------

@lru_cache(maxsize=None)
def crc_polynomials() -> dict[str, tuple[int, int]]:
    return {name: (int(width), int(poly, 16)) for name, width, poly in data_table("crc_poly.dat")}


@lru_cache(maxsize=None)
def conv_taps() -> np.ndarray:
    """(3, K) tap matrix; column 0 taps the current input."""
    rows = data_table("tbcc_poly.dat")
    k = next(int(r[1]) for r in rows if r[0] == "constraint_length")
    generators = [int(r[1], 8) for r in rows if r[0] == "generator"]
    taps = np.array([[(g >> (k - 1 - l)) & 1 for l in range(k)] for g in generators], dtype=np.uint8)
    taps.setflags(write=False)
    return taps


@lru_cache(maxsize=None)
def qpp_parameters() -> dict[int, tuple[int, int]]:
    return {int(k): (int(f1), int(f2)) for k, f1, f2 in data_table("qpp_sizes.dat")}


@lru_cache(maxsize=None)
def column_permutation() -> np.ndarray:
    perm = np.array([int(tok) for row in data_table("subblock_permutation.dat") for tok in row], dtype=np.int64)
    if sorted(perm.tolist()) != list(range(32)):
        raise CodingError("subblock_permutation.dat is not a permutation of 0..31")
    perm.setflags(write=False)
    return perm


# --- CRC --------------------------------------------------------------------

def crc(payload, name: str = "crc16") -> int:
    """
    Bit-serial CRC with zero initial state.

    Args:
        payload: Bits to protect
        name: Polynomial name from crc_poly.dat ('crc16', 'crc24a')

    Returns:
        CRC register value, most significant bit first on the wire
    """
    width, poly = crc_polynomials()[name]
    mask = (1 << width) - 1
    reg = 0
    for b in as_bits(payload):
        feedback = ((reg >> (width - 1)) & 1) ^ int(b)
        reg = (reg << 1) & mask
        if feedback:
            reg ^= poly
    return reg


def crc16(payload) -> int:
    return crc(payload, "crc16")


def crc24a(payload) -> int:
    return crc(payload, "crc24a")


def crc_scramble(crc_value: int, rnti: int) -> int:
    return (crc_value ^ rnti) & 0xFFFF


def attach_crc(payload, name: str = "crc16", mask: int = 0) -> np.ndarray:
    width, _ = crc_polynomials()[name]
    payload = as_bits(payload)
    return np.concatenate([payload, int_to_bits(crc(payload, name) ^ mask, width)])


@lru_cache(maxsize=256)
def _crc_matrix(length: int, name: str) -> np.ndarray:
    # Zero-init CRC is linear, so row i is the CRC of the i-th unit vector
    width, _ = crc_polynomials()[name]
    rows = np.zeros((length, width), dtype=np.int64)
    for i in range(length):
        unit = np.zeros(length, dtype=np.uint8)
        unit[i] = 1
        rows[i] = int_to_bits(crc(unit, name), width)
    rows.setflags(write=False)
    return rows


def crc_batch(payloads: np.ndarray, name: str = "crc16") -> np.ndarray:
    """CRC of every row of a (B, L) bit matrix, as integers."""
    payloads = np.atleast_2d(payloads)
    width, _ = crc_polynomials()[name]
    parity = (payloads.astype(np.int64) @ _crc_matrix(payloads.shape[1], name)) % 2
    return parity @ (1 << np.arange(width - 1, -1, -1, dtype=np.int64))


# --- Gold sequence / scrambling ---------------------------------------------

def _lfsr(initial: np.ndarray, taps: tuple[int, ...], total: int) -> np.ndarray:
    # x(n+31) = XOR of x(n+t); blocks of 28 only depend on already known values
    x = np.zeros(total + 31, dtype=np.uint8)
    x[:31] = initial
    n = 0
    while n < total:
        m = min(28, total - n)
        acc = np.zeros(m, dtype=np.uint8)
        for t in taps:
            acc ^= x[n + t:n + t + m]
        x[n + 31:n + 31 + m] = acc
        n += m
    return x


@lru_cache(maxsize=8192)
def gold_sequence(seed: int, length: int) -> np.ndarray:
    """
    Length-31 Gold sequence c(n) with the standard 1600-step fast-forward.

    Args:
        seed: 31-bit initial value of the second m-sequence
        length: Number of output bits

    Returns:
        Read-only uint8 array of `length` bits
    """
    if length < 1:
        raise CodingError(f"Gold sequence length must be >= 1, got {length}")
    total = length + GOLD_FAST_FORWARD
    x1_init = np.zeros(31, dtype=np.uint8)
    x1_init[0] = 1
    x2_init = ((int(seed) & 0x7FFFFFFF) >> np.arange(31)) & 1
    x1 = _lfsr(x1_init, (0, 3), total)
    x2 = _lfsr(x2_init.astype(np.uint8), (0, 1, 2, 3), total)
    c = x1[GOLD_FAST_FORWARD:total] ^ x2[GOLD_FAST_FORWARD:total]
    c.setflags(write=False)
    return c


def scramble_bits(bits, c_init: int, offset: int = 0) -> np.ndarray:
    bits = as_bits(bits)
    return bits ^ gold_sequence(c_init, offset + len(bits))[offset:]


def descramble_soft(soft, c_init: int, offset: int = 0) -> np.ndarray:
    soft = np.asarray(soft, dtype=np.float64)
    c = gold_sequence(c_init, offset + soft.shape[-1])[offset:]
    return soft * (1.0 - 2.0 * c)


# --- Tail-biting convolutional code -----------------------------------------

def conv_encode(payload) -> np.ndarray:
    """Rate-1/3 tail-biting convolutional encoder; returns [d0 | d1 | d2]."""
    c = as_bits(payload)
    if len(c) < 1:
        raise CodingError("conv_encode needs at least one bit")
    taps = conv_taps()
    out = np.zeros((taps.shape[0], len(c)), dtype=np.uint8)
    for l in range(taps.shape[1]):
        out ^= taps[:, l:l + 1] & np.roll(c, l)[None, :]
    return out.reshape(-1)


@lru_cache(maxsize=None)
def _trellis() -> tuple[np.ndarray, np.ndarray]:
    """
    Predecessor table and expected-output signs of the 64-state trellis.

    State bit 5 holds the most recent input. For next state s the two
    predecessors are ((s & 31) << 1) | j and the input bit is s >> 5.
    """
    taps = conv_taps()
    k = taps.shape[1]
    memory = k - 1
    n_states = 1 << memory
    preds = np.zeros((n_states, 2), dtype=np.int64)
    signs = np.zeros((n_states, 2, taps.shape[0]), dtype=np.float64)
    for s in range(n_states):
        u = s >> (memory - 1)
        for j in range(2):
            p = ((s & (n_states // 2 - 1)) << 1) | j
            preds[s, j] = p
            for i in range(taps.shape[0]):
                bit = taps[i, 0] & u
                for l in range(1, k):
                    bit ^= taps[i, l] & ((p >> (memory - l)) & 1)
                signs[s, j, i] = 1.0 - 2.0 * bit
    preds.setflags(write=False)
    signs.setflags(write=False)
    return preds, signs


def conv_decode_batch(soft: np.ndarray, payload_len: int) -> np.ndarray:
    """
    Wrap-around Viterbi decoding of many same-size tail-biting codewords.

    Each row is extended circularly by WRAP_DEPTH steps on both sides so the
    unknown start state is learned from the block's own tail.

    Args:
        soft: (B, 3*payload_len) soft bits, stream-major
        payload_len: Information bits per codeword

    Returns:
        (B, payload_len) uint8 decisions
    """
    if payload_len <= 0:
        raise CodingError("payload_len must be positive")
    soft = np.atleast_2d(np.asarray(soft, dtype=np.float64))
    batch = soft.shape[0]
    if soft.shape[1] != 3 * payload_len:
        raise CodingError(f"Expected {3 * payload_len} soft bits, got {soft.shape[1]}")

    preds, signs = _trellis()
    n_states = preds.shape[0]
    steps = np.arange(-WRAP_DEPTH, payload_len + WRAP_DEPTH) % payload_len
    obs = soft.reshape(batch, 3, payload_len)[:, :, steps]
    # (T, B, n_states, 2) branch metrics in one product
    branch = np.einsum("bit,sji->tbsj", obs, signs)

    metric = np.zeros((batch, n_states))
    decisions = np.empty((len(steps), batch, n_states), dtype=np.uint8)
    for t in range(len(steps)):
        cand = metric[:, preds] + branch[t]
        choice = cand[:, :, 1] > cand[:, :, 0]
        decisions[t] = choice
        metric = np.where(choice, cand[:, :, 1], cand[:, :, 0])
        metric -= metric.max(axis=1, keepdims=True)

    state = metric.argmax(axis=1)
    rows = np.arange(batch)
    top = n_states.bit_length() - 2
    bits = np.empty((batch, len(steps)), dtype=np.uint8)
    for t in range(len(steps) - 1, -1, -1):
        bits[:, t] = state >> top
        state = ((state & (n_states // 2 - 1)) << 1) | decisions[t, rows, state]
    return bits[:, WRAP_DEPTH:WRAP_DEPTH + payload_len]


def conv_decode(soft, payload_len: int) -> np.ndarray:
    return conv_decode_batch(np.asarray(soft, dtype=np.float64)[None, :], payload_len)[0]


@lru_cache(maxsize=256)
def _conv_generator(d: int) -> np.ndarray:
    # the tail-biting code is linear over GF(2): row i encodes the i-th unit vector
    g = np.stack([conv_encode(row) for row in np.eye(d, dtype=np.uint8)]).astype(np.int64)
    g.setflags(write=False)
    return g


def conv_encode_batch(payloads) -> np.ndarray:
    """Encode every row of a (B, D) bit matrix; returns (B, 3D) stream-major codewords."""
    payloads = np.atleast_2d(np.asarray(payloads, dtype=np.int64))
    return ((payloads @ _conv_generator(payloads.shape[1])) % 2).astype(np.uint8)


# --- Rate matching ----------------------------------------------------------

@lru_cache(maxsize=None)
def subblock_pattern(d: int) -> np.ndarray:
    """Sub-block interleaver output as indices into the input stream (-1 = filler)."""
    rows = math.ceil(d / 32)
    filler = rows * 32 - d
    y = np.concatenate([-np.ones(filler, dtype=np.int64), np.arange(d, dtype=np.int64)]).reshape(rows, 32)
    pattern = y[:, column_permutation()].T.reshape(-1)
    pattern.setflags(write=False)
    return pattern


@lru_cache(maxsize=None)
def _parity2_pattern(d: int) -> np.ndarray:
    rows = math.ceil(d / 32)
    k_pi = rows * 32
    y = np.concatenate([-np.ones(k_pi - d, dtype=np.int64), np.arange(d, dtype=np.int64)])
    k = np.arange(k_pi)
    return y[(column_permutation()[k // rows] + 32 * (k % rows) + 1) % k_pi]


def _shift_stream(pattern: np.ndarray, offset: int) -> np.ndarray:
    return np.where(pattern >= 0, pattern + offset, -1)


@lru_cache(maxsize=None)
def _conv_order(d: int) -> np.ndarray:
    pattern = subblock_pattern(d)
    w = np.concatenate([pattern, _shift_stream(pattern, d), _shift_stream(pattern, 2 * d)])
    order = w[w >= 0]
    order.setflags(write=False)
    return order


@lru_cache(maxsize=None)
def _turbo_order(d: int, rv: int) -> np.ndarray:
    v0 = subblock_pattern(d)
    k_pi = len(v0)
    w = np.empty(3 * k_pi, dtype=np.int64)
    w[:k_pi] = v0
    w[k_pi::2] = _shift_stream(v0, d)
    w[k_pi + 1::2] = _shift_stream(_parity2_pattern(d), 2 * d)
    rows = k_pi // 32
    k0 = rows * (2 * math.ceil(len(w) / (8 * rows)) * rv + 2)
    rolled = np.roll(w, -k0)
    order = rolled[rolled >= 0]
    order.setflags(write=False)
    return order


def _select(codeword: np.ndarray, order: np.ndarray, target_len: int) -> np.ndarray:
    if target_len < 1:
        raise CodingError(f"target_len must be >= 1, got {target_len}")
    return codeword[order[np.arange(target_len) % len(order)]]


@lru_cache(maxsize=512)
def _collect_matrix(order_key: tuple, n_out: int, target_len: int) -> np.ndarray:
    kind, d, rv = order_key
    order = _conv_order(d) if kind == "conv" else _turbo_order(d, rv)
    m = np.zeros((target_len, n_out))
    m[np.arange(target_len), order[np.arange(target_len) % len(order)]] = 1.0
    m.setflags(write=False)
    return m


def rate_match_conv(codeword, target_len: int) -> np.ndarray:
    """Interleave, then repeat or puncture a [d0|d1|d2] codeword to target_len bits."""
    codeword = as_bits(codeword)
    if len(codeword) % 3:
        raise CodingError("Convolutional codeword length must be a multiple of 3")
    return _select(codeword, _conv_order(len(codeword) // 3), target_len)


def rate_match_conv_batch(codewords, target_len: int) -> np.ndarray:
    codewords = np.atleast_2d(np.asarray(codewords, dtype=np.uint8))
    if codewords.shape[1] % 3:
        raise CodingError("Convolutional codeword length must be a multiple of 3")
    order = _conv_order(codewords.shape[1] // 3)
    return codewords[:, order[np.arange(target_len) % len(order)]]


def derate_match_conv(soft: np.ndarray, payload_len: int) -> np.ndarray:
    """
    Soft inverse of rate_match_conv; repeated positions accumulate.

    Accepts a single row of soft bits or a (B, E) batch.
    """
    soft = np.asarray(soft, dtype=np.float64)
    m = _collect_matrix(("conv", payload_len, 0), 3 * payload_len, soft.shape[-1])
    return soft @ m


def rate_match_turbo(codeword, target_len: int, rv: int = 0) -> np.ndarray:
    codeword = as_bits(codeword)
    if len(codeword) % 3:
        raise CodingError("Turbo codeword length must be a multiple of 3")
    return _select(codeword, _turbo_order(len(codeword) // 3, rv), target_len)


def derate_match_turbo(soft: np.ndarray, payload_len: int, rv: int = 0) -> np.ndarray:
    soft = np.asarray(soft, dtype=np.float64)
    d = payload_len + 4
    m = _collect_matrix(("turbo", d, rv), 3 * d, soft.shape[-1])
    return soft @ m


# --- Turbo code -------------------------------------------------------------

@lru_cache(maxsize=None)
def qpp_interleaver(k: int) -> np.ndarray:
    params = qpp_parameters()
    if k not in params:
        raise CodingError(f"Unsupported turbo block size {k}; supported: {sorted(params)}")
    f1, f2 = params[k]
    i = np.arange(k, dtype=np.int64)
    pi = (f1 * i + f2 * i * i) % k
    pi.setflags(write=False)
    return pi


def _rsc_encode(u: np.ndarray) -> tuple[np.ndarray, list[int], list[int]]:
    s1 = s2 = s3 = 0
    parity = np.zeros(len(u), dtype=np.uint8)
    for i, b in enumerate(u):
        r = int(b) ^ s2 ^ s3
        parity[i] = r ^ s1 ^ s3
        s1, s2, s3 = r, s1, s2
    tail_x, tail_z = [], []
    for _ in range(3):
        x = s2 ^ s3
        tail_x.append(x)
        tail_z.append(s1 ^ s3)
        s1, s2, s3 = 0, s1, s2
    return parity, tail_x, tail_z


def turbo_encode(payload) -> np.ndarray:
    """
    Rate-1/3 turbo encoder with QPP interleaver and trellis termination.

    Returns:
        [d0 | d1 | d2], each stream of length K + 4
    """
    c = as_bits(payload)
    k = len(c)
    pi = qpp_interleaver(k)
    z, x_t, z_t = _rsc_encode(c)
    z2, x2_t, z2_t = _rsc_encode(c[pi])
    d0 = np.concatenate([c, [x_t[0], z_t[1], x2_t[0], z2_t[1]]])
    d1 = np.concatenate([z, [z_t[0], x_t[2], z2_t[0], x2_t[2]]])
    d2 = np.concatenate([z2, [x_t[1], z_t[2], x2_t[1], z2_t[2]]])
    return np.concatenate([d0, d1, d2]).astype(np.uint8)


@lru_cache(maxsize=None)
def _rsc_trellis() -> tuple[np.ndarray, np.ndarray]:
    # state = s1*4 + s2*2 + s3
    nxt = np.zeros((8, 2), dtype=np.int64)
    par = np.zeros((8, 2), dtype=np.float64)
    for st in range(8):
        s1, s2, s3 = (st >> 2) & 1, (st >> 1) & 1, st & 1
        for u in range(2):
            r = u ^ s2 ^ s3
            nxt[st, u] = (r << 2) | (s1 << 1) | s2
            par[st, u] = 1.0 - 2.0 * (r ^ s1 ^ s3)
    return nxt, par


def _max_log_map(sys_llr: np.ndarray, par_llr: np.ndarray, apriori: np.ndarray) -> np.ndarray:
    """One constituent max-log-MAP pass over a terminated trellis; returns full LLRs of the steps."""
    nxt, par = _rsc_trellis()
    steps = len(sys_llr)
    u_sign = np.array([1.0, -1.0])
    # gamma[t, state, u]
    gamma = 0.5 * ((sys_llr + apriori)[:, None, None] * u_sign[None, None, :]
                   + par_llr[:, None, None] * par[None, :, :])
    neg = -1e30
    alpha = np.full((steps + 1, 8), neg)
    alpha[0, 0] = 0.0
    for t in range(steps):
        cand = alpha[t][:, None] + gamma[t]
        a = np.full(8, neg)
        np.maximum.at(a, nxt.reshape(-1), cand.reshape(-1))
        alpha[t + 1] = a - a.max()
    beta = np.full((steps + 1, 8), neg)
    beta[steps, 0] = 0.0
    for t in range(steps - 1, -1, -1):
        b = (gamma[t] + beta[t + 1][nxt]).max(axis=1)
        beta[t] = b - b.max()
    total = alpha[:-1][:, :, None] + gamma + beta[1:][:, nxt]
    return total[:, :, 0].max(axis=1) - total[:, :, 1].max(axis=1)


def turbo_decode(soft, payload_len: int, iterations: int = TURBO_MAX_ITERATIONS, crc_check=None) -> np.ndarray:
    """
    Iterative max-log-MAP turbo decoder.

    Args:
        soft: 3 * (payload_len + 4) soft bits laid out as turbo_encode's output
        payload_len: Block size K (a QPP size)
        iterations: Upper bound on full iterations
        crc_check: Optional predicate on the hard decisions; decoding stops
            as soon as it returns True

    Returns:
        K hard-decided bits
    """
    k = payload_len
    pi = qpp_interleaver(k)
    soft = np.asarray(soft, dtype=np.float64)
    d = k + 4
    if soft.shape != (3 * d,):
        raise CodingError(f"Expected {3 * d} soft bits for K={k}, got {soft.shape}")
    d0, d1, d2 = soft[:d], soft[d:2 * d], soft[2 * d:]

    sys1 = np.concatenate([d0[:k], [d0[k], d2[k], d1[k + 1]]])
    par1 = np.concatenate([d1[:k], [d1[k], d0[k + 1], d2[k + 1]]])
    sys2 = np.concatenate([d0[:k][pi], [d0[k + 2], d2[k + 2], d1[k + 3]]])
    par2 = np.concatenate([d2[:k], [d1[k + 2], d0[k + 3], d2[k + 3]]])

    apriori1 = np.zeros(k + 3)
    apriori2 = np.zeros(k + 3)
    bits = (d0[:k] < 0).astype(np.uint8)
    for _ in range(max(1, iterations)):
        full1 = _max_log_map(sys1, par1, apriori1)
        extrinsic1 = full1[:k] - sys1[:k] - apriori1[:k]
        apriori2[:k] = extrinsic1[pi]
        full2 = _max_log_map(sys2, par2, apriori2)
        extrinsic2 = full2[:k] - sys2[:k] - apriori2[:k]
        apriori1[:k] = 0.0
        apriori1[pi] = extrinsic2
        posterior = sys1[:k] + apriori1[:k] + extrinsic1
        bits = (posterior < 0).astype(np.uint8)
        if crc_check is not None and crc_check(bits):
            break
    return bits


# --- Modulation and channel -------------------------------------------------

def qpsk_map(bits) -> np.ndarray:
    bits = as_bits(bits)
    if len(bits) % 2:
        raise CodingError(f"QPSK mapping needs an even bit count, got {len(bits)}")
    pairs = 1.0 - 2.0 * bits.reshape(-1, 2)
    return (pairs[:, 0] + 1j * pairs[:, 1]) / np.sqrt(2)


def qpsk_soft_demap(symbols, noise_var) -> np.ndarray:
    """
    Per-bit LLRs of Gray QPSK symbols.

    noise_var is the complex noise variance per symbol (scalar or per-symbol
    array); LLR = 2*sqrt(2)*component/noise_var.
    """
    symbols = np.asarray(symbols, dtype=np.complex128)
    scale = 2.0 * np.sqrt(2.0) / np.asarray(noise_var, dtype=np.float64)
    llr = np.empty(symbols.shape[:-1] + (2 * symbols.shape[-1],))
    llr[..., 0::2] = symbols.real * scale
    llr[..., 1::2] = symbols.imag * scale
    return llr


def awgn(signal, snr_db: float, rng: np.random.Generator, signal_power: float = 1.0) -> np.ndarray:
    """Add complex white Gaussian noise at snr_db relative to signal_power."""
    signal = np.asarray(signal, dtype=np.complex128)
    noise_var = signal_power * 10.0 ** (-snr_db / 10.0)
    noise = rng.standard_normal(signal.shape) + 1j * rng.standard_normal(signal.shape)
    return signal + noise * np.sqrt(noise_var / 2.0)
