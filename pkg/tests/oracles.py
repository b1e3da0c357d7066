"""Independent reference implementations shared by the unit and acceptance tests.

These deliberately avoid the package's vectorised code paths: metrics are
recounted sample by sample, and the remap rule is applied one sample at a time.
"""

import numpy as np
from scipy.spatial.distance import pdist

from sldetect.evaluation import HEATMAP_ROWS


def brute_force_metrics(cm):
    """Per-sample recount, written independently of the vectorised implementation."""
    samples = [(t, p) for t in range(3) for p in range(3) for _ in range(int(cm[t][p]))]
    out = {}
    prec, rec, f1, sup = [], [], [], []
    for c in range(3):
        tp = sum(1 for t, p in samples if t == c and p == c)
        pred_c = sum(1 for t, p in samples if p == c)
        true_c = sum(1 for t, p in samples if t == c)
        pr = tp / pred_c if pred_c else 0.0
        rc = tp / true_c if true_c else 0.0
        prec.append(pr)
        rec.append(rc)
        f1.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
        sup.append(true_c)
    present = [c for c in range(3) if sup[c] > 0]
    n = len(samples)
    out["recall"] = rec
    out["precision"] = prec
    out["f1"] = f1
    out["uar"] = sum(rec[c] for c in present) / len(present)
    out["macro_precision"] = sum(prec[c] for c in present) / len(present)
    out["macro_f1"] = sum(f1[c] for c in present) / len(present)
    out["accuracy"] = sum(1 for t, p in samples if t == p) / n
    out["weighted_f1"] = sum(f1[c] * sup[c] for c in range(3)) / n
    out["weighted_precision"] = sum(prec[c] * sup[c] for c in range(3)) / n
    return out


def brute_force_remap(hm):
    """Expand the heatmap to individual samples and apply the two-class rule one by one."""
    samples = [(key, col) for i, key in enumerate(HEATMAP_ROWS) for col in range(3) for _ in range(hm.counts[i, col])]
    positives = [(k, c) for k, c in samples if k.startswith("laugh") or k in ("smile-high", "smile-medium")]
    correct = sum(1 for k, c in positives if c == 0 or (k.startswith("smile") and c == 1))
    laughs = [(k, c) for k, c in samples if k.startswith("laugh")]
    return 100 * correct / len(positives), 100 * sum(1 for _, c in laughs if c == 0) / len(laughs)


def three_clusters(seed=0, per=20, dim=10, spread=1.0, separation=10.0):
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((3, dim))
    centres *= separation * spread / np.min(pdist(centres))
    x = np.concatenate([c + spread * rng.standard_normal((per, dim)) for c in centres])
    return x, np.repeat(np.arange(3), per)


def neighbour_purity(points, labels, k=5):
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1)[:, :k]
    return float(np.mean(labels[nn] == labels[:, None]))
