#!/usr/bin/env python3
"""Regenerates reference.json from the reference implementations.

Inputs are described by recipes rather than stored: every byte comes from a
SHA-256 counter stream, so the Rust side can rebuild each input and check it
against the recorded SHA-256 before hashing.

Requirements: libfuzzy (ssdeep 2.14.x) as a shared library, located through
the LIBFUZZY environment variable, and the `py-tlsh` package (5.0.0).

    LIBFUZZY=/path/to/libfuzzy.so python3 generate.py > reference.json
"""

import ctypes
import hashlib
import json
import os
import struct
import sys

import tlsh

WORDS = [
    b"alpha", b"bravo", b"charlie", b"delta", b"echo", b"foxtrot", b"golf",
    b"hotel", b"india", b"juliett", b"kilo", b"lima", b"mike", b"november",
    b"oscar", b"papa",
]


def stream(seed, n):
    out = bytearray()
    counter = 0
    while len(out) < n:
        out += hashlib.sha256(struct.pack("<QQ", seed, counter)).digest()
        counter += 1
    return bytes(out[:n])


def text(seed, n):
    out = bytearray()
    src = stream(seed, n)
    i = 0
    while len(out) < n:
        b = src[i % len(src)]
        out += WORDS[b & 15]
        out += b"\n" if b >> 4 == 0 else b" "
        i += 1
    return bytes(out[:n])


def base(r):
    kind, seed, n = r["kind"], r.get("seed", 0), r["len"]
    if kind == "random":
        return stream(seed, n)
    if kind == "text":
        return text(seed, n)
    if kind == "repeat":
        unit = stream(seed, r["unit"])
        return (unit * (n // len(unit) + 1))[:n]
    if kind == "constant":
        return bytes([r["byte"]]) * n
    raise ValueError(kind)


def build(r):
    data = bytearray(base(r))
    for e in r.get("edits", []):
        off = e["offset"]
        if e["op"] == "overwrite":
            data[off:off + e["len"]] = stream(e["seed"], e["len"])
        elif e["op"] == "insert":
            data[off:off] = stream(e["seed"], e["len"])
        elif e["op"] == "delete":
            del data[off:off + e["len"]]
        else:
            raise ValueError(e["op"])
    return bytes(data)


def recipes():
    out = []
    sizes = [64, 100, 257, 1000, 4096, 5000, 12345, 65536, 100000, 300000, 1048576]
    for i, n in enumerate(sizes):
        out.append({"name": f"random-{n}", "kind": "random", "seed": 1000 + i, "len": n})
    for i, n in enumerate([64, 500, 5000, 50000, 400000, 1048576]):
        out.append({"name": f"text-{n}", "kind": "text", "seed": 2000 + i, "len": n})
    for i, (n, unit) in enumerate([(64, 3), (1000, 7), (5000, 64), (70000, 1000), (1048576, 4096)]):
        out.append({"name": f"repeat-{n}-{unit}", "kind": "repeat", "seed": 3000 + i, "len": n, "unit": unit})
    for n, byte in [(64, 0), (5000, 0x41), (100000, 0xFF)]:
        out.append({"name": f"constant-{n}-{byte:02x}", "kind": "constant", "byte": byte, "len": n})

    # Families of related inputs so that pairwise scores are not all zero.
    families = [
        ("random", 4000, 5000),
        ("random", 4001, 20000),
        ("random", 4002, 200000),
        ("text", 4003, 8000),
        ("text", 4004, 60000),
    ]
    for fi, (kind, seed, n) in enumerate(families):
        stem = {"kind": kind, "seed": seed, "len": n}
        out.append(dict(stem, name=f"fam{fi}-base"))
        edits = [
            [{"op": "overwrite", "offset": n // 2, "len": max(1, n // 100), "seed": seed + 1}],
            [{"op": "insert", "offset": n // 3, "len": max(1, n // 20), "seed": seed + 2}],
            [{"op": "delete", "offset": n // 4, "len": n // 10}],
            [
                {"op": "overwrite", "offset": n // 10, "len": n // 8, "seed": seed + 3},
                {"op": "insert", "offset": n // 2, "len": n // 8, "seed": seed + 4},
                {"op": "delete", "offset": 0, "len": n // 16},
            ],
            [{"op": "overwrite", "offset": 0, "len": n // 2, "seed": seed + 5}],
            [{"op": "insert", "offset": n, "len": n, "seed": seed + 6}],
        ]
        for ei, ed in enumerate(edits):
            out.append(dict(stem, name=f"fam{fi}-edit{ei}", edits=ed))
    return out


def main():
    lib = ctypes.CDLL(os.environ["LIBFUZZY"])
    lib.fuzzy_hash_buf.argtypes = [ctypes.c_char_p, ctypes.c_uint32, ctypes.c_char_p]
    lib.fuzzy_compare.argtypes = [ctypes.c_char_p, ctypes.c_char_p]

    def ssdeep_hash(b):
        buf = ctypes.create_string_buffer(256)
        if lib.fuzzy_hash_buf(b, len(b), buf) != 0:
            raise RuntimeError("fuzzy_hash_buf failed")
        return buf.value.decode()

    inputs = []
    for r in recipes():
        data = build(r)
        t = tlsh.hash(data)
        inputs.append({
            "recipe": r,
            "len": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
            "ssdeep": ssdeep_hash(data),
            "tlsh": None if t == "TNULL" else t,
        })

    n = len(inputs)
    ssdeep_scores = [[0] * n for _ in range(n)]
    tlsh_dist = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            a, b = inputs[i], inputs[j]
            ssdeep_scores[i][j] = lib.fuzzy_compare(a["ssdeep"].encode(), b["ssdeep"].encode())
            if a["tlsh"] and b["tlsh"]:
                tlsh_dist[i][j] = tlsh.diff(a["tlsh"], b["tlsh"])

    json.dump({
        "oracles": {"ssdeep": "libfuzzy 2.14.2", "tlsh": "py-tlsh 5.0.0"},
        "inputs": inputs,
        "ssdeep_scores": ssdeep_scores,
        "tlsh_distances": tlsh_dist,
    }, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
