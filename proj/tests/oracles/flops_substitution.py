#!/usr/bin/env python3
"""Independent substitution of the decoding-FLOPs formulas.

Run once to produce the constants frozen in tests/test_flops.cpp and the
acceptance suite. Plain Python integers, no shared code with the C++ model.
"""

PRESETS = {
    # name: (layers, hidden, q_heads, kv_heads, head_dim, intermediate)
    "qwen3-1.7b": (28, 2048, 16, 8, 128, 6144),
    "qwen3-4b": (36, 2560, 32, 8, 128, 9728),
    "qwen3-8b": (36, 4096, 32, 8, 128, 12288),
    "qwen3-32b": (64, 5120, 64, 8, 128, 25600),
}


def param(l, H, q, kv, h, i):
    return l * (2 * 2 * H * q * h + 2 * 2 * kv * h * H + 3 * 2 * H * i)


def attn(kind, l, q, h, T, C, P):
    if kind == "full":
        return l * (4 * q * h * T)
    if kind == "tova":
        return l * (4 * q * h * C + 2 * q * h * T)
    if kind == "quest":
        return l * (4 * q * h * C + 2 * q * h * (-(-T // P)))
    if kind == "asyncspade":
        return l * (4 * q * h * C)
    raise ValueError(kind)


if __name__ == "__main__":
    print("unit param", param(1, 1, 1, 1, 1, 1))
    for name, (l, H, q, kv, h, i) in PRESETS.items():
        p = param(l, H, q, kv, h, i)
        print(name, "param", p)
        for kind in ("asyncspade", "quest", "tova", "full"):
            a = attn(kind, l, q, h, 32768, 2048, 16)
            print(f"  {kind:10s} T=32768 C=2048 P=16 attn={a} total={p + a}")
