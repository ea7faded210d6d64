"""Pure-Python raw DEFLATE walker that reports block structure.

Slow, but independent of zlib's decoder, so it doubles as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

_LBASE = [3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31, 35, 43, 51, 59, 67, 83, 99, 115,
          131, 163, 195, 227, 258]
_LEXT = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0]
_DBASE = [1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193, 257, 385, 513, 769, 1025, 1537,
          2049, 3073, 4097, 6145, 8193, 12289, 16385, 24577]
_DEXT = [0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13]
_CL_ORDER = [16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15]
_KINDS = ("stored", "fixed", "dynamic")


class InspectError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    kind: str  # stored | fixed | dynamic
    out_len: int
    symbols: int  # literals plus matches; 0 for stored blocks


class _Bits:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def bits(self, n: int) -> int:
        v = 0
        for i in range(n):
            p = self.pos
            if p >> 3 >= len(self.data):
                raise InspectError("truncated stream")
            v |= ((self.data[p >> 3] >> (p & 7)) & 1) << i
            self.pos = p + 1
        return v


def _canonical(lengths: list[int]) -> dict[tuple[int, int], int]:
    maxl = max(lengths, default=0)
    count = [0] * (maxl + 1)
    for n in lengths:
        if n:
            count[n] += 1
    code, nxt = 0, [0] * (maxl + 1)
    for n in range(1, maxl + 1):
        code = (code + count[n - 1]) << 1 if n > 1 else 0
        nxt[n] = code
    table = {}
    for sym, n in enumerate(lengths):
        if n:
            table[(n, nxt[n])] = sym
            nxt[n] += 1
    return table


def _decode(br: _Bits, table) -> int:
    code = 0
    for n in range(1, 16):
        code = (code << 1) | br.bits(1)
        sym = table.get((n, code))
        if sym is not None:
            return sym
    raise InspectError("invalid Huffman code")


_FIXED = (_canonical([8] * 144 + [9] * 112 + [7] * 24 + [8] * 8), _canonical([5] * 30))


def inspect(payload: bytes) -> tuple[bytes, list[Block]]:
    """Decode a raw DEFLATE stream, returning the output and its blocks in order."""
    out = bytearray()
    blocks = list(iter_blocks(payload, out))
    return bytes(out), blocks


def iter_blocks(payload: bytes, out: bytearray | None = None):
    """Yield blocks as they are decoded; ``out`` collects the output if given."""
    br = _Bits(payload)
    out = bytearray() if out is None else out
    while True:
        final = br.bits(1)
        kind = br.bits(2)
        start, nsym = len(out), 0
        if kind == 0:
            br.pos = (br.pos + 7) & ~7
            n = br.bits(16)
            if br.bits(16) != n ^ 0xFFFF:
                raise InspectError("stored length check failed")
            i = br.pos >> 3
            out += payload[i:i + n]
            br.pos += 8 * n
        elif kind == 3:
            raise InspectError("reserved block type")
        else:
            if kind == 1:
                lit, dist = _FIXED
            else:
                hlit, hdist, hclen = br.bits(5) + 257, br.bits(5) + 1, br.bits(4) + 4
                cl = [0] * 19
                for i in range(hclen):
                    cl[_CL_ORDER[i]] = br.bits(3)
                cl_table = _canonical(cl)
                lens: list[int] = []
                while len(lens) < hlit + hdist:
                    s = _decode(br, cl_table)
                    if s < 16:
                        lens.append(s)
                    elif s == 16:
                        if not lens:
                            raise InspectError("repeat with no previous length")
                        lens += [lens[-1]] * (3 + br.bits(2))
                    elif s == 17:
                        lens += [0] * (3 + br.bits(3))
                    else:
                        lens += [0] * (11 + br.bits(7))
                lit, dist = _canonical(lens[:hlit]), _canonical(lens[hlit:hlit + hdist])
            while True:
                s = _decode(br, lit)
                if s < 256:
                    out.append(s)
                elif s == 256:
                    break
                else:
                    s -= 257
                    length = _LBASE[s] + br.bits(_LEXT[s])
                    ds = _decode(br, dist)
                    d = _DBASE[ds] + br.bits(_DEXT[ds])
                    if d > len(out):
                        raise InspectError("distance beyond output")
                    for _ in range(length):
                        out.append(out[-d])
                nsym += 1
        yield Block(_KINDS[kind], len(out) - start, nsym)
        if final:
            return


def block_kinds(payload: bytes) -> tuple[str, ...]:
    return tuple(b.kind for b in inspect(payload)[1])


def block_starts(payload: bytes, after: int = 0) -> list[int]:
    """Output offsets where blocks begin; stops at the first start beyond ``after``."""
    starts, pos = [], 0
    for b in iter_blocks(payload):
        starts.append(pos)
        if pos > after:
            break
        pos += b.out_len
    return starts
