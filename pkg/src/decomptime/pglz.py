"""Native PGLZ codec, byte-compatible with PostgreSQL's pg_lzcompress.

The compressor keeps a 4096-entry history of recent positions hashed into
chains, emits literals and (offset, length) tags behind one control byte per
eight items, and gives up early when the output grows past the strategy's
size budget.
"""

from __future__ import annotations

from dataclasses import dataclass

MAX_MATCH = 273
HISTORY_SIZE = 4096
MAX_OFFSET = 0x0FFF
INT_MAX = 2**31 - 1


class PglzError(ValueError):
    pass


@dataclass(frozen=True)
class Strategy:
    min_input_size: int = 32
    max_input_size: int = INT_MAX
    min_comp_rate: int = 25
    first_success_by: int = 1024
    match_size_good: int = 128
    match_size_drop: int = 10


DEFAULT = Strategy()
ALWAYS = Strategy(0, INT_MAX, 0, INT_MAX, 128, 6)


def _hash_size(slen: int) -> int:
    if slen < 128:
        return 512
    if slen < 256:
        return 1024
    if slen < 512:
        return 2048
    if slen < 1024:
        return 4096
    return 8192


def _encode(src: bytes, strategy: Strategy, capped: bool) -> bytes | None:
    slen = len(src)
    good_match = min(max(strategy.match_size_good, 17), MAX_MATCH)
    good_drop = min(max(strategy.match_size_drop, 0), 100)
    need_rate = min(max(strategy.min_comp_rate, 0), 99)
    if slen > INT_MAX // 100:
        result_max = (slen // 100) * (100 - need_rate)
    else:
        result_max = (slen * (100 - need_rate)) // 100
    mask = _hash_size(slen) - 1

    # history entries are 1-based; index 0 terminates every chain
    hist_start = [0] * (mask + 1)
    h_next = [0] * (HISTORY_SIZE + 1)
    h_prev = [0] * (HISTORY_SIZE + 1)
    h_hidx = [0] * (HISTORY_SIZE + 1)
    h_pos = [0] * (HISTORY_SIZE + 1)
    hist_next = 1
    recycle = False

    out = bytearray()
    ctrl_pos = -1
    ctrlb = 0
    ctrl = 0
    found_match = False
    dp = 0

    def hidx(p: int) -> int:
        if slen - p < 4:
            return src[p] & mask
        return ((src[p] << 6) ^ (src[p + 1] << 4) ^ (src[p + 2] << 2) ^ src[p + 3]) & mask

    while dp < slen:
        if capped:
            if len(out) >= result_max:
                return None
            if not found_match and len(out) >= strategy.first_success_by:
                return None

        # find_match
        best_len = 0
        best_off = 0
        gm = good_match
        ent = hist_start[hidx(dp)]
        while ent:
            hp = h_pos[ent]
            off = dp - hp
            if off >= MAX_OFFSET:
                break
            this_len = 0
            if best_len >= 16:
                if src[dp:dp + best_len] == src[hp:hp + best_len]:
                    this_len = best_len
                    ip = dp + best_len
                    hq = hp + best_len
                    while ip < slen and src[ip] == src[hq] and this_len < MAX_MATCH:
                        this_len += 1
                        ip += 1
                        hq += 1
            else:
                ip = dp
                hq = hp
                while ip < slen and src[ip] == src[hq] and this_len < MAX_MATCH:
                    this_len += 1
                    ip += 1
                    hq += 1
            if this_len > best_len:
                best_len = this_len
                best_off = off
            ent = h_next[ent]
            if ent:
                if best_len >= gm:
                    break
                gm -= (gm * good_drop) // 100

        if ctrl & 0xFF == 0:
            if ctrl_pos >= 0:
                out[ctrl_pos] = ctrlb
            ctrl_pos = len(out)
            out.append(0)
            ctrlb = 0
            ctrl = 1

        if best_len > 2:
            ctrlb |= ctrl
            ctrl = (ctrl << 1) & 0xFF
            if best_len > 17:
                out += bytes((((best_off & 0xF00) >> 4) | 0x0F, best_off & 0xFF, best_len - 18))
            else:
                out += bytes((((best_off & 0xF00) >> 4) | (best_len - 3), best_off & 0xFF))
            step = best_len
            found_match = True
        else:
            ctrl = (ctrl << 1) & 0xFF
            out.append(src[dp])
            step = 1

        for _ in range(step):
            # hist_add with recycling of the oldest entry
            hi = hidx(dp)
            if recycle:
                if h_prev[hist_next] == 0:
                    hist_start[h_hidx[hist_next]] = h_next[hist_next]
                else:
                    h_next[h_prev[hist_next]] = h_next[hist_next]
                h_prev[h_next[hist_next]] = h_prev[hist_next]
            head = hist_start[hi]
            h_next[hist_next] = head
            h_prev[hist_next] = 0
            h_hidx[hist_next] = hi
            h_pos[hist_next] = dp
            if head:
                h_prev[head] = hist_next
            hist_start[hi] = hist_next
            hist_next += 1
            if hist_next >= HISTORY_SIZE + 1:
                hist_next = 1
                recycle = True
            dp += 1

    if ctrl_pos >= 0:
        out[ctrl_pos] = ctrlb
    if capped and len(out) >= result_max:
        return None
    return bytes(out)


def compress(src: bytes, strategy: Strategy = DEFAULT) -> bytes | None:
    """Compress under ``strategy``; None means PostgreSQL would store the datum raw."""
    if strategy.match_size_good <= 0 or not (
        strategy.min_input_size <= len(src) <= strategy.max_input_size
    ):
        return None
    return _encode(src, strategy, capped=True)


def encode(src: bytes, strategy: Strategy = DEFAULT) -> bytes:
    """Run the encoder to completion without the early give-up rules."""
    return _encode(src, strategy, capped=False)


def decompress(src: bytes, raw_len: int) -> bytes:
    dp = bytearray()
    sp = 0
    send = len(src)
    while sp < send and len(dp) < raw_len:
        ctrl = src[sp]
        sp += 1
        for _ in range(8):
            if sp >= send or len(dp) >= raw_len:
                break
            if ctrl & 1:
                if sp + 1 >= send:
                    raise PglzError("truncated tag")
                b0 = src[sp]
                length = (b0 & 0x0F) + 3
                off = ((b0 & 0xF0) << 4) | src[sp + 1]
                sp += 2
                if length == 18:
                    if sp >= send:
                        raise PglzError("truncated tag")
                    length += src[sp]
                    sp += 1
                if off == 0 or off > len(dp):
                    raise PglzError("bad back-reference")
                length = min(length, raw_len - len(dp))
                start = len(dp) - off
                if off >= length:
                    dp += dp[start:start + length]
                else:
                    # overlapping copy repeats the last `off` bytes
                    pattern = dp[start:]
                    dp += (pattern * (length // off + 1))[:length]
            else:
                dp.append(src[sp])
                sp += 1
            ctrl >>= 1
    if len(dp) != raw_len or sp != send:
        raise PglzError("length mismatch")
    return bytes(dp)
