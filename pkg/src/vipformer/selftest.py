"""Fast oracle and gradient checks runnable from an installed package.

Each check compares the library against an independent, deliberately naive
evaluation (explicit loops, direct formulas, finite differences) and prints
one line. The full property suites live in the test directory.
"""

from __future__ import annotations

import io
import math
import time

import numpy as np
from scipy.special import erf

from . import tensor as T
from .checkpoint import Checkpoint, from_bytes, to_bytes
from .contrast import ContrastConfig, combined_loss, nt_xent
from .model import EncoderBlock, ViPFormerConfig, count_parameters, pool
from .optim import SchedulerState, lr_at
from .rng import RngStream
from .tensor import Tensor, grad_check
from .tokenize import farthest_point_sample, knn_group


def _naive_ntxent(a, b, tau):
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    n = len(a)

    def one(x, y, i):
        num = math.exp(float(x[i] @ y[i]) / tau)
        den = sum(math.exp(float(x[i] @ x[j]) / tau) for j in range(n) if j != i)
        den += sum(math.exp(float(x[i] @ y[j]) / tau) for j in range(n))
        return -math.log(num / den)

    return sum(one(a, b, i) + one(b, a, i) for i in range(n)) / (2 * n)


def check_matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.array([[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)])
    return np.abs(T.matmul(Tensor(a), Tensor(b)).data - ref).max() < 1e-12


def check_gelu(rng):
    x = rng.normal(size=50)
    ref = x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return np.abs(T.gelu(Tensor(x)).data - ref).max() < 1e-12


def check_softmax(rng):
    x = rng.normal(size=(6, 5)) * 10
    s = T.softmax_lastdim(Tensor(x)).data
    return np.abs(s.sum(-1) - 1).max() < 1e-6 and np.all(np.isfinite(T.softmax_lastdim(Tensor([1000.0, 0.0])).data))


def check_op_grads(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    g = Tensor(rng.normal(size=5) + 1, requires_grad=True)
    bta = Tensor(rng.normal(size=5), requires_grad=True)
    fns = [
        lambda _: (T.gelu(T.linear(x, w)) ** 2).sum(),
        lambda _: (T.softmax_lastdim(T.matmul(x, w)) * Tensor(np.arange(5.0))).sum(),
        lambda _: (T.layer_norm(T.matmul(x, w), g, bta) ** 3).sum(),
        lambda _: T.logsumexp_lastdim(T.matmul(x, w)).sum(),
    ]
    return max(grad_check(f, [x, w, g, bta]) for f in fns) < 1e-4


def check_block_grad(rng):
    cfg = ViPFormerConfig(depth=1, heads=2, dim=8, mlp_ratio=2, dropout=0.0, dtype="float64")
    block = EncoderBlock(cfg, RngStream(1), np.float64)
    z = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
    params = [p for _, p in block.named_parameters()]
    return grad_check(lambda _: (block(z) ** 2).sum(), [z] + params) < 1e-4


def check_loss_grad(rng):
    p1, p2, f = (Tensor(rng.normal(size=(4, 6)), requires_grad=True) for _ in range(3))
    cfg = ContrastConfig(tau=0.5, alpha=0.7)
    return grad_check(lambda _: combined_loss(p1, p2, f, cfg), [p1, p2, f]) < 1e-4


def check_ntxent(rng):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        a, b = rng.normal(size=(n, 5)), rng.normal(size=(n, 5))
        tau = float(rng.uniform(0.1, 1.0))
        worst = max(worst, abs(nt_xent(Tensor(a), Tensor(b), tau).item() - _naive_ntxent(a, b, tau)))
    same = np.ones((4, 3))
    degenerate = abs(nt_xent(Tensor(same), Tensor(same), 0.1).item() - math.log(7)) < 1e-9
    single = nt_xent(Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 3))), 0.1).item() == 0.0
    return worst < 1e-8 and degenerate and single


def check_fps_knn(rng):
    for _ in range(50):
        n = int(rng.integers(2, 40))
        pts = rng.integers(0, 4, size=(n, 3)).astype(float)
        g = int(rng.integers(1, n + 1))
        start = int(rng.integers(n))
        chosen = [start]
        for _ in range(g - 1):
            best, arg = -1.0, -1
            for j in range(n):
                d = min(float(((pts[j] - pts[c]) ** 2).sum()) for c in chosen)
                if d > best:
                    best, arg = d, j
            chosen.append(arg)
        if list(farthest_point_sample(pts, g, start=start)) != chosen:
            return False
        k = int(rng.integers(1, n + 1))
        centers = pts[chosen]
        ref = [sorted(range(n), key=lambda j, c=c: (float(((pts[j] - c) ** 2).sum()), j))[:k] for c in centers]
        if knn_group(pts, centers, k).tolist() != ref:
            return False
    return True


def check_schedule(_rng):
    s = SchedulerState()
    return (abs(lr_at(s, 5) - 1e-3) < 1e-12 and abs(lr_at(s, 105) - 6e-4) < 1e-12
            and abs(lr_at(s, 52.5) - 5e-4) < 1e-12)


def check_params(_rng):
    t1 = count_parameters(ViPFormerConfig(depth=9, mlp_ratio=2, heads=4, length=128, dim=256))
    t2 = count_parameters(ViPFormerConfig(depth=9, mlp_ratio=4, heads=6, length=128, dim=384))
    return abs(t1 / 5.1e6 - 1) <= 0.05 and abs(t2 / 16.7e6 - 1) <= 0.05


def check_pool(_rng):
    z = Tensor(np.full((1, 5, 3), 2.5))
    return np.array_equal(pool(z).data, np.full((1, 6), 2.5))


def check_checkpoint(rng):
    ck = Checkpoint({"param/a": rng.normal(size=(3, 2)).astype(np.float32)}, {"dim": 8}, {"step": 3})
    raw = to_bytes(ck)
    return to_bytes(from_bytes(raw)) == raw


CHECKS = [
    ("matmul matches a triple-loop product", check_matmul),
    ("gelu matches the erf form", check_gelu),
    ("softmax rows sum to one and stay finite", check_softmax),
    ("primitive gradients match finite differences", check_op_grads),
    ("encoder block gradient matches finite differences", check_block_grad),
    ("combined loss gradient matches finite differences", check_loss_grad),
    ("nt-xent matches the direct formula", check_ntxent),
    ("fps and knn match brute force", check_fps_knn),
    ("learning-rate schedule anchor values", check_schedule),
    ("parameter counts of the shipped presets", check_params),
    ("pooling a constant sequence", check_pool),
    ("checkpoint bytes round-trip", check_checkpoint),
]


def run(out: io.TextIOBase, seed: int = 0) -> bool:
    ok_all = True
    for i, (name, fn) in enumerate(CHECKS):
        t0 = time.perf_counter()
        try:
            ok = bool(fn(np.random.default_rng([seed, i])))
            err = ""
        except Exception as exc:  # a crashing check is a failing check
            ok, err = False, f" ({type(exc).__name__}: {exc})"
        ok_all &= ok
        out.write(f"{'PASS' if ok else 'FAIL'}  {name}  [{time.perf_counter() - t0:.2f}s]{err}\n")
    return ok_all
