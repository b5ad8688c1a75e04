"""Regenerates the committed CLI fixture tensors. Output is deterministic."""

import math
import random
import struct
from pathlib import Path

HERE = Path(__file__).parent


def write(name, dims, values):
    values = list(values)
    assert len(values) == math.prod(dims)
    header = b"XAMT" + struct.pack("<III", 1, 1, len(dims))
    body = struct.pack(f"<{len(dims)}I", *dims) + struct.pack(f"<{len(values)}f", *values)
    (HERE / name).write_bytes(header + body)


def blob(p, cy, cx, sigma, amp):
    return [[amp * math.exp(-((r - cy) ** 2 + (c - cx) ** 2) / (2 * sigma**2)) for c in range(p)] for r in range(p)]


def attention(name, p, subject_blobs):
    """Token 0 is background; tokens 1.. are the blobs."""
    maps = [blob(p, *b) for b in subject_blobs]
    bg = [[0.2 + 0.5 * (1 - max(m[r][c] for m in maps)) for c in range(p)] for r in range(p)]
    grids = [bg] + maps
    # [P, P, N], token index fastest
    write(name, [p, p, len(grids)], (g[r][c] for r in range(p) for c in range(p) for g in grids))


def latent(name, channels, size, seed):
    rng = random.Random(seed)
    write(name, [channels, size, size], (rng.gauss(0.0, 1.0) for _ in range(channels * size * size)))


def rect_mask(name, p, top, left, rows, cols):
    write(name, [p, p], (1.0 if top <= r < top + rows and left <= c < left + cols else 0.0 for r in range(p) for c in range(p)))


if __name__ == "__main__":
    attention("overlap.xamt", 16, [(5, 5, 2.5, 0.9), (6, 7, 2.5, 0.8), (4, 11, 2.0, 0.7)])
    attention("disjoint.xamt", 16, [(3, 3, 1.2, 0.9), (3, 12, 1.2, 0.8), (12, 7, 1.2, 0.7)])
    latent("latent.xamt", 4, 64, 7)
    rect_mask("mask_0.xamt", 16, 2, 2, 7, 7)
    rect_mask("mask_1.xamt", 16, 9, 3, 6, 8)
    rect_mask("mask_2.xamt", 16, 1, 9, 6, 6)
    # one subject peaking at 0.8
    single = [[0.1] * 4 for _ in range(4)]
    single[1][2] = 0.8
    write("single.xamt", [4, 4, 2], (v for r in range(4) for c in range(4) for v in (0.5, single[r][c])))
    (HERE / "corrupt.xamt").write_bytes(b"XAMX" + bytes(12))
    write("truncated.xamt", [16, 16, 4], [0.5] * 1024)
    data = (HERE / "truncated.xamt").read_bytes()
    (HERE / "truncated.xamt").write_bytes(data[:-6])
