"""Brute-force reference implementations.

Deliberately slow and written from scratch with Python lists and loops; no
function here calls into the main-path modules, so agreement between the two
is evidence rather than tautology.
"""
from __future__ import annotations

import math
from fractions import Fraction


def _rows(x):
    return [list(map(float, row)) for row in x]


def _count(gamma, cells):
    return math.floor(Fraction(gamma).limit_denominator(10**6) * cells)


def naive_matmul_oracle(a, b):
    a, b = _rows(a), _rows(b)
    n, k, m = len(a), len(b), len(b[0])
    return [[math.fsum(a[i][p] * b[p][j] for p in range(k)) for j in range(m)] for i in range(n)]


def softmax_oracle(x):
    out = []
    for row in _rows(x):
        top = max(row)
        e = [math.exp(v - top) for v in row]
        s = math.fsum(e)
        out.append([v / s for v in e])
    return out


def naive_attention_oracle(Q, K, V, scale=1.0):
    """softmax(scale * Q K^T) V, one query and one key at a time."""
    Q, K, V = _rows(Q), _rows(K), _rows(V)
    out = []
    for q in Q:
        logits = [scale * math.fsum(qi * ki for qi, ki in zip(q, k)) for k in K]
        top = max(logits)
        w = [math.exp(l - top) for l in logits]
        total = math.fsum(w)
        out.append([math.fsum(w[j] * V[j][c] for j in range(len(V))) / total for c in range(len(V[0]))])
    return out


def resize_oracle(x, out_h, out_w, mode="bilinear"):
    """Per-pixel align_corners=False sampling."""
    x = _rows(x)
    h, w = len(x), len(x[0])

    def coord(i, n_in, n_out):
        return (i + 0.5) * n_in / n_out - 0.5

    out = []
    for i in range(out_h):
        row = []
        for j in range(out_w):
            if mode == "nearest":
                si = min(int(math.floor((i + 0.5) * h / out_h)), h - 1)
                sj = min(int(math.floor((j + 0.5) * w / out_w)), w - 1)
                row.append(x[si][sj])
                continue
            sy = min(max(coord(i, h, out_h), 0.0), h - 1)
            sx = min(max(coord(j, w, out_w), 0.0), w - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            top = x[y0][x0] * (1 - fx) + x[y0][x1] * fx
            bot = x[y1][x0] * (1 - fx) + x[y1][x1] * fx
            row.append(top * (1 - fy) + bot * fy)
        out.append(row)
    return out


def sort_topk_oracle(M, gamma):
    """Full sort of all cells; keep the top floor(gamma * cells), lowest index first on ties."""
    rows = _rows(M)
    w = len(rows[0])
    flat = [v for row in rows for v in row]
    k = _count(gamma, len(flat))
    order = sorted(range(len(flat)), key=lambda i: (-flat[i], i))
    keep = set(order[:k])
    return [[flat[i * w + j] if (i * w + j) in keep else 0.0 for j in range(w)] for i in range(len(rows))]


def alg1_stepthrough_oracle(maps, ratios):
    """Line-by-line transcription of the multi-subject selection loop."""
    N = len(maps)
    h, w = len(maps[0]), len(maps[0][0])
    M = [_rows(m) for m in maps]
    num = [_count(g, h * w) for g in ratios]
    if sum(num) > h * w:
        raise ValueError("capacity exceeded")
    cur = [0] * N
    Mbar = [[[0.0] * w for _ in range(h)] for _ in range(N)]
    flag = [[0] * w for _ in range(h)]
    while sum(1 for j in range(N) if cur[j] < num[j]) > 0:
        for j in range(N):
            if cur[j] < num[j]:
                # Set_NegInf
                for y in range(h):
                    for x in range(w):
                        if flag[y][x] == 1:
                            M[j][y][x] = -math.inf
                # Copy_Top1: first maximum in row-major order
                by, bx = 0, 0
                for y in range(h):
                    for x in range(w):
                        if M[j][y][x] > M[j][by][bx]:
                            by, bx = y, x
                Mbar[j][by][bx] = M[j][by][bx]
                # Set_Flag
                flag[by][bx] = 1
                cur[j] += 1
    return Mbar


def mc_mean(values):
    values = list(values)
    return math.fsum(values) / len(values)


def naive_mlp_oracle(x, w1, b1, w2, b2):
    """gelu(x W1 + b1) W2 + b2 with the tanh GELU, element by element."""
    x, w1, w2 = _rows(x), _rows(w1), _rows(w2)
    b1, b2 = list(map(float, b1)), list(map(float, b2))
    c = math.sqrt(2.0 / math.pi)
    out = []
    for row in x:
        hid = []
        for j in range(len(b1)):
            u = math.fsum(row[i] * w1[i][j] for i in range(len(row))) + b1[j]
            hid.append(0.5 * u * (1.0 + math.tanh(c * (u + 0.044715 * u**3))))
        out.append([math.fsum(hid[i] * w2[i][j] for i in range(len(hid))) + b2[j] for j in range(len(b2))])
    return out
