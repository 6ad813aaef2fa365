#!/usr/bin/env python3
"""Write the bundled 18-node graph fixture.

The graph is a folded backbone: consecutive nodes are linked, and non-adjacent
nodes whose positions on a random planar walk come within 1.6 units are linked
as contacts. Node features (18 columns) come from 4 latent attributes per node
pushed through a two-layer graph convolution over the same graph, then
column-standardized.

    python3 scripts/build_graph18_fixture.py crates/core/data
"""
import math
import os
import random
import sys

N = 18
D = 18
LATENT = 4
HIDDEN = 8


def backbone_graph(rnd):
    pts = [(0.0, 0.0)]
    ang = 0.0
    for _ in range(1, N):
        ang += rnd.uniform(-2.0, 2.0)
        x, y = pts[-1]
        pts.append((x + math.cos(ang), y + math.sin(ang)))
    edges = {(i, i + 1) for i in range(N - 1)}
    for i in range(N):
        for j in range(i + 2, N):
            if math.dist(pts[i], pts[j]) < 1.6:
                edges.add((i, j))
    return sorted(edges)


def normalized(edges):
    a = [[1.0 if i == j else 0.0 for j in range(N)] for i in range(N)]
    for s, t in edges:
        a[s][t] = a[t][s] = 1.0
    deg = [sum(row) for row in a]
    return [[a[i][j] / math.sqrt(deg[i] * deg[j]) for j in range(N)] for i in range(N)]


def matmul(x, y):
    return [[sum(x[i][k] * y[k][j] for k in range(len(y))) for j in range(len(y[0]))] for i in range(len(x))]


def gauss(rnd, r, c, scale):
    return [[rnd.gauss(0.0, 1.0) * scale for _ in range(c)] for _ in range(r)]


def main(dst):
    rnd = random.Random(18)
    edges = backbone_graph(rnd)
    a = normalized(edges)
    h0 = gauss(rnd, N, LATENT, 1.0)
    w1 = gauss(rnd, LATENT, HIDDEN, 0.5)
    w2 = gauss(rnd, HIDDEN, D, 1.0 / math.sqrt(HIDDEN))
    h1 = [[math.tanh(v) for v in row] for row in matmul(matmul(a, h0), w1)]
    f = matmul(matmul(a, h1), w2)
    for j in range(D):
        col = [f[i][j] for i in range(N)]
        mean = sum(col) / N
        std = math.sqrt(sum((v - mean) ** 2 for v in col) / (N - 1))
        for i in range(N):
            f[i][j] = (f[i][j] - mean) / std
    with open(os.path.join(dst, "graph18-edges.csv"), "w") as out:
        out.write("src,dst\n")
        for s, t in edges:
            out.write(f"{s},{t}\n")
    with open(os.path.join(dst, "graph18-features.csv"), "w") as out:
        for row in f:
            out.write(",".join(repr(v) for v in row) + "\n")


if __name__ == "__main__":
    main(sys.argv[1])
