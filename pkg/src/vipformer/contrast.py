"""NT-Xent objectives for intra-modal and cross-modal contrast.

For anchors ``a`` and positives ``b`` (row ``i`` of each forms a pair) the
per-anchor loss is::

    l(i, a, b) = -log  exp(s(a_i, b_i)/tau)
                       -------------------------------------------------------
                       sum_{k != i} exp(s(a_i, a_k)/tau) + sum_k exp(s(a_i, b_k)/tau)

with ``s`` the cosine similarity. The batch loss averages ``l(i, a, b)`` and
``l(i, b, a)`` over all rows, i.e. divides their total by ``2N``. The same
form serves both the two-view point objective and the point/image objective.
Similarities are evaluated in float64 regardless of the activation dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError, ShapeError
from .tensor import Tensor

MODES = ("imc_only", "cmc_only", "both")
MODE_ALIASES = {"imc": "imc_only", "cmc": "cmc_only", "imc_only": "imc_only",
                "cmc_only": "cmc_only", "both": "both"}
MODE_LABELS = {"imc_only": "IMC only", "cmc_only": "CMC only", "both": "IMC & CMC"}


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.1
    alpha: float = 1.0
    mode: str = "both"

    def __post_init__(self):
        object.__setattr__(self, "mode", MODE_ALIASES.get(self.mode, self.mode))
        if self.mode not in MODES:
            raise ParameterError(f"unknown contrast mode {self.mode!r}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not self.alpha >= 0:
            raise ParameterError(f"alpha must be non-negative, got {self.alpha}")

    @property
    def uses_imc(self) -> bool:
        return self.mode in ("imc_only", "both")

    @property
    def uses_cmc(self) -> bool:
        return self.mode in ("cmc_only", "both")


def _unit_rows(x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"embeddings must be [N, d], got shape {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("contrastive loss needs at least one pair")
    x = x.astype(np.float64) if x.dtype != np.float64 else x
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    if np.any(norms == 0):
        raise ContractError("cosine similarity is undefined for a zero-norm embedding row")
    return x / T.sqrt((x * x).sum(axis=1, keepdims=True))


def nt_xent(a, b, tau: float) -> Tensor:
    """Symmetrized NT-Xent between paired rows of ``a`` and ``b``."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    a, b = _unit_rows(a), _unit_rows(b)
    if a.shape != b.shape:
        raise ShapeError(f"paired embeddings differ in shape: {a.shape} vs {b.shape}")
    n = a.shape[0]
    inv_tau = 1.0 / tau
    s_aa = T.matmul(a, a.T) * inv_tau
    s_bb = T.matmul(b, b.T) * inv_tau
    s_ab = T.matmul(a, b.T) * inv_tau
    s_ba = s_ab.T
    self_mask = np.where(np.eye(n, dtype=bool), -np.inf, 0.0)
    diag = (np.arange(n), np.arange(n))
    pos = s_ab[diag]
    l_ab = T.logsumexp_lastdim(T.concat([s_aa + self_mask, s_ab], axis=1)) - pos
    l_ba = T.logsumexp_lastdim(T.concat([s_bb + self_mask, s_ba], axis=1)) - pos
    return (l_ab.sum() + l_ba.sum()) * (1.0 / (2 * n))


def imc_loss(p_t1, p_t2, tau: float) -> Tensor:
    """Two-view point-cloud objective."""
    return nt_xent(p_t1, p_t2, tau)


def cmc_loss(p, f, tau: float) -> Tensor:
    """Point/image objective; ``p`` rows are the anchors of the first term."""
    return nt_xent(p, f, tau)


def loss_components(p_t1, p_t2, f, cfg: ContrastConfig) -> dict:
    """Return ``{"imc", "cmc", "total"}``; inactive objectives map to ``None``."""
    if cfg.uses_imc and (p_t1 is None or p_t2 is None):
        raise ContractError(f"mode {cfg.mode} needs both point views")
    if cfg.uses_cmc and (p_t1 is None or f is None):
        raise ContractError(f"mode {cfg.mode} needs point and image features")
    imc = imc_loss(p_t1, p_t2, cfg.tau) if cfg.uses_imc else None
    cmc = cmc_loss(p_t1, f, cfg.tau) if cfg.uses_cmc else None
    if cfg.mode == "both":
        total = imc + cmc * float(cfg.alpha)
    else:
        total = imc if imc is not None else cmc
    return {"imc": imc, "cmc": cmc, "total": total}


def combined_loss(p_t1, p_t2, f, cfg: ContrastConfig) -> Tensor:
    return loss_components(p_t1, p_t2, f, cfg)["total"]
