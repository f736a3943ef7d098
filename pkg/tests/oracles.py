"""Independent brute-force oracles and fixtures shared by the tests."""
import numpy as np

from compseg.netcore import ModelConfig, SegModel


def brute_force_corrupt(labels, assignment, n):
    """All-pairs Chebyshev scan; lower pair index wins on collisions."""
    labels = np.asarray(labels)
    out = labels.copy()
    taken = np.zeros(labels.shape, dtype=bool)
    for sup, inf in assignment:
        sup_yx = np.argwhere(labels == sup)
        for y, x in np.argwhere(labels == inf):
            if taken[y, x] or len(sup_yx) == 0:
                continue
            if np.max(np.abs(sup_yx - (y, x)), axis=1).min() <= n:
                out[y, x] = sup
                taken[y, x] = True
    return out


def brute_force_metrics(pred, gt, K):
    """Per-pixel set counting, no matrix algebra."""
    pred = [int(v) for v in np.ravel(pred)]
    gt = [int(v) for v in np.ravel(gt)]
    conf = [[0] * K for _ in range(K)]
    for g, p in zip(gt, pred):
        conf[g][p] += 1
    ious, accs = [], []
    for c in range(K):
        X = {i for i, p in enumerate(pred) if p == c}
        Y = {i for i, g in enumerate(gt) if g == c}
        if X | Y:
            ious.append(len(X & Y) / len(X | Y))
        accs.append(len(X & Y) / len(Y) if Y else None)
    acc_a = sum(p == g for p, g in zip(pred, gt)) / len(gt)
    return conf, (sum(ious) / len(ious) if ious else None), accs, acc_a


def random_model(rng, D=4, K=4, hidden=6, scale=0.5, seed=0, **kw):
    model = SegModel(ModelConfig(D, K, hidden=hidden, seed=seed, **kw))
    for v in model.params.values():
        v[...] = rng.standard_normal(v.shape) * scale
    return model
