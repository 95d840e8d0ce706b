"""Loop-form reference implementations of the training losses."""
import math

import numpy as np


def nt_xent_loops(zi, zj, tau):
    z = np.concatenate([zi, zj])
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    M = len(zi)
    total = 0.0
    for a in range(2 * M):
        pos = a + M if a < M else a - M
        num = math.exp(z[a] @ z[pos] / tau)
        den = sum(math.exp(z[a] @ z[b] / tau) for b in range(2 * M) if b != a)
        total += -math.log(num / den)
    return total / (2 * M)


def miic_loops(z, zp, zn, w, lam, m):
    def cs(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    out = []
    for i in range(len(z)):
        num = math.exp(lam * w[i] * cs(z[i], zp[i]))
        neg = np.mean([math.exp(lam * (cs(z[i], zn[i, k]) + m)) for k in range(zn.shape[1])])
        out.append(-math.log(num / (num + neg)))
    return np.array(out)


def rec_loops(logits, targets, lengths):
    per = []
    for b in range(len(targets)):
        tot = 0.0
        for t in range(lengths[b]):
            row = logits[b, t]
            tot += -(row[targets[b, t]] - math.log(np.exp(row).sum()))
        per.append(tot / lengths[b])
    return float(np.mean(per))
