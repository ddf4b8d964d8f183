"""Brute-force reference: materialize the whole mapping matrix, then loop in Python.

Products go through the same row-deterministic ``matmul_rows`` as the
library, so each row of the full matrix is bit-identical to the row the
streaming code computes; everything after the product is independent.
"""

import numpy as np

from headmaps._linalg import matmul_rows


def full_m(embed, w_vo, unembed):
    return matmul_rows(matmul_rows(embed, w_vo), unembed)


def ranked(row):
    # descending value, ties to the lower id
    return sorted(range(len(row)), key=lambda j: (-float(row[j]), j))


def topk(row, k, direction="promote"):
    row = -row if direction == "suppress" else row
    return ranked(row)[:k]


def relation_score(m, pairs, k, direction="promote"):
    hits = sum(1 for s, t in pairs if t in topk(m[s], k, direction))
    return hits / len(pairs)


def saliency(embed, w_vo):
    y = matmul_rows(embed, w_vo)
    out = []
    for i in range(embed.shape[0]):
        num = np.sqrt(np.sum(y[i] * y[i]))
        den = np.sqrt(np.sum(embed[i] * embed[i]))
        out.append(num / den if den > 0 else np.float32(0))
    return np.array(out, dtype=np.float32)


def output_space(embed, w_vo, unembed):
    norms = np.sqrt((unembed * unembed).sum(axis=0))
    u_hat = (unembed / np.where(norms > 0, norms, 1)).astype(np.float32)
    m = matmul_rows(matmul_rows(embed, w_vo), u_hat)
    targets = set()
    for row in m:
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        targets.add(best)
    return len(targets) / embed.shape[0]


def salient(embed, w_vo, unembed, k_tokens, n_targets):
    sigma = saliency(embed, w_vo)
    m = full_m(embed, w_vo, unembed)
    sources = ranked(sigma)[:k_tokens]
    return [(s, topk(m[s], n_targets)) for s in sources]
