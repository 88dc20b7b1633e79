"""Frozen-feature evaluation: embedding export, linear probing, N-way K-shot."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError
from .rng import RngStream
from .tokenize import build_point_patches_batch

DEFAULT_EVAL_SEED = 20220901


def extract_embeddings(model, dataset, feature: str = "adapter", eval_seed: int = DEFAULT_EVAL_SEED,
                       batch_size: int = 32, workers: int = 1):
    """One feature row per sample, in dataset order.

    ``feature="adapter"`` returns output-adapter features (BN in eval mode);
    ``feature="pooled"`` returns the pooled encoder feature. Farthest point
    sampling for sample ``i`` is seeded from ``(eval_seed, i)``, so repeated
    calls give identical matrices.
    """
    if feature not in ("adapter", "pooled"):
        raise ParameterError(f"unknown feature kind {feature!r}")
    root = RngStream(eval_seed).substream("eval-fps")
    rows = []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            clouds = [dataset.points[i] for i in idx]
            rngs = [root.substream(i) for i in idx]
            patches, centers = build_point_patches_batch(clouds, model.config.length, model.config.k,
                                                         rngs, workers)
            r = model.point_features(patches, centers, train=False)
            out = model.adapt(r, train=False) if feature == "adapter" else r
            rows.append(out.data.astype(np.float64))
    return np.concatenate(rows, axis=0), np.asarray(dataset.labels).copy()


@dataclass
class LinearClassifier:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    classes: np.ndarray

    def decision(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weight + self.bias

    def predict(self, x):
        return self.classes[np.argmax(self.decision(x), axis=1)]


def fit_linear(x, y, l2: float = 1e-4, loss: str = "softmax", iters: int = 500) -> LinearClassifier:
    """Multinomial linear classifier by full-batch Nesterov gradient descent.

    Features are standardized with training statistics. ``loss="hinge"``
    swaps the softmax cross-entropy for a one-vs-rest squared hinge, which is
    closer to a linear SVM.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ContractError("linear probe needs at least two classes in the training split")
    if loss not in ("softmax", "hinge"):
        raise ParameterError(f"unknown probe loss {loss!r}")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    z = (x - mean) / scale
    n, d = z.shape
    c = len(classes)
    target = np.searchsorted(classes, y)
    onehot = np.eye(c)[target]
    zb = np.hstack([z, np.ones((n, 1))])
    # curvature bound of the data term gives a safe step size
    lip = np.linalg.norm(zb, 2) ** 2 / n * (0.5 if loss == "softmax" else 2.0) + l2
    step = 1.0 / lip
    w = np.zeros((d + 1, c))
    w_prev = w.copy()
    for it in range(iters):
        look = w + (it / (it + 3.0)) * (w - w_prev)
        s = zb @ look
        if loss == "softmax":
            s -= s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
            g_s = (p - onehot) / n
        else:
            sign = 2.0 * onehot - 1.0
            margin = np.maximum(0.0, 1.0 - sign * s)
            g_s = -2.0 * sign * margin / n
        grad = zb.T @ g_s
        grad[:-1] += l2 * look[:-1]
        w_prev, w = w, look - step * grad
    return LinearClassifier(w[:-1], w[-1], mean, scale, classes)


def probe_accuracy(train_x, train_y, test_x, test_y, **kw) -> float:
    clf = fit_linear(train_x, train_y, **kw)
    return float(np.mean(clf.predict(test_x) == np.asarray(test_y)))


def linear_probe(features, labels, split, **kw) -> float:
    """Fit on ``split[0]`` rows, report accuracy on ``split[1]`` rows."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    train_idx, test_idx = (np.asarray(s) for s in split)
    return probe_accuracy(features[train_idx], labels[train_idx], features[test_idx], labels[test_idx], **kw)


@dataclass(frozen=True)
class FewShotSpec:
    n_way: int = 5
    k_shot: int = 10
    runs: int = 10
    query_per_class: int = 20

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.runs < 1 or self.query_per_class < 1:
            raise ParameterError("need n_way >= 2, k_shot >= 1, runs >= 1, query_per_class >= 1")


def fewshot_runs(features, labels, spec: FewShotSpec, rng: RngStream, **probe_kw) -> np.ndarray:
    """Accuracy of each N-way K-shot episode on precomputed features."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    need = spec.k_shot + spec.query_per_class
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= need]
    if len(eligible) < spec.n_way:
        raise ParameterError(f"{spec.n_way}-way {spec.k_shot}-shot with {spec.query_per_class} queries "
                             f"needs {spec.n_way} classes with >= {need} samples; only {len(eligible)} qualify")
    accs = []
    for r in range(spec.runs):
        run_rng = rng.substream("run", r)
        chosen = run_rng.choice(eligible, size=spec.n_way, replace=False)
        tr, te = [], []
        for cls in chosen:
            members = np.nonzero(labels == cls)[0]
            pick = run_rng.choice(members, size=need, replace=False)
            tr.extend(pick[:spec.k_shot])
            te.extend(pick[spec.k_shot:])
        accs.append(linear_probe(features, labels, (tr, te), **probe_kw))
    return np.asarray(accs)


def fewshot(source, dataset_or_labels, spec: FewShotSpec, rng: RngStream, **kw):
    """Mean and standard deviation of few-shot accuracy over ``spec.runs`` episodes.

    ``source`` is either a model (features are extracted from
    ``dataset_or_labels``) or a precomputed feature matrix (then the second
    argument holds the labels).
    """
    probe_kw = {k: kw.pop(k) for k in ("l2", "loss", "iters") if k in kw}
    if isinstance(source, np.ndarray):
        features, labels = source, np.asarray(dataset_or_labels)
    else:
        features, labels = extract_embeddings(source, dataset_or_labels, **kw)
    accs = fewshot_runs(features, labels, spec, rng, **probe_kw)
    return float(accs.mean()), float(accs.std())


def write_embeddings(path, features, labels, sample_ids):
    """Tab-separated export: ``sample_id``, ``label``, then one column per feature."""
    with open(path, "w") as fh:
        for sid, lab, row in zip(sample_ids, labels, features):
            fh.write("\t".join([str(sid), str(int(lab))] + [repr(float(v)) for v in row]) + "\n")
