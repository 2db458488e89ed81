"""Reference model of the NIB16 toy cipher used by the fixtures."""

SBOX = [0xC, 0x5, 0x6, 0xB, 0x9, 0x0, 0xA, 0xD, 0x3, 0xE, 0xF, 0x8, 0x4, 0x7, 0x1, 0x2]
MASK = 0xFFFF
ROUNDS = 4


def rotl16(x, n):
    n %= 16
    return ((x << n) | (x >> (16 - n))) & MASK if n else x & MASK


def sub_nibbles(s, sbox=SBOX):
    out = 0
    for i in range(4):
        out |= sbox[(s >> (4 * i)) & 0xF] << (4 * i)
    return out


def shift_state(s):
    return rotl16(s, 5)


def mix_state(s):
    return (s ^ rotl16(s, 6)) & MASK


def add_round_key(s, rk):
    return (s ^ rk) & MASK


def round_key(key, r):
    return rotl16(key, 3 * r) ^ r


def cipher(pt, key, sbox=SBOX):
    s = (pt ^ key) & MASK
    for r in range(1, ROUNDS + 1):
        s = sub_nibbles(s, sbox)
        s = shift_state(s)
        if r < ROUNDS:
            s = mix_state(s)
        s = add_round_key(s, round_key(key, r))
    return s


if __name__ == "__main__":
    assert sub_nibbles(0x0123) == 0xC56B
    assert shift_state(0x8000) == 0x0010
    assert mix_state(0x0400) == 0x0401
    for pt, key in [(0x0000, 0x0000), (0x1234, 0xABCD), (0xFFFF, 0x0F0F)]:
        print(f"Cipher(0x{pt:04X}, 0x{key:04X}) = 0x{cipher(pt, key):04X}")
