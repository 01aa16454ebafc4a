"""Two-level Kronecker product factorized (TKPF) bilinear pooling.

The projected bilinear feature of a feature map ``X`` (``d`` channels by
``N`` spatial locations) is ``(A kron B) vec(X X^T)`` with
``A = I_r kron A_hat`` and ``B = B_hat kron I_r``. The efficient path never
forms ``X X^T`` or the Kronecker product; it applies the small factors to
folded views of ``X`` and returns ``vec(S T^T)`` with ``S = B X`` and
``T = A X``.

``vec`` is column-major throughout, so ``vec(M)`` of a ``b x a`` matrix is
``M.T.reshape(-1)`` in row-major storage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NonFiniteError

L2_EPS = 1e-12
# floor under |v| inside the signed square root; keeps the backward pass finite at v == 0
_SQRT_FLOOR = 1e-30


@dataclass(frozen=True)
class TKPFConfig:
    """Factorization hyperparameters.

    ``a`` and ``b`` are the row counts of the first-level factors, ``r`` the
    second-level block size and ``q`` the number of averaged branches. The
    pooled feature has ``a * b`` entries.
    """

    a: int = 64
    b: int = 64
    r: int = 16
    q: int = 4
    d: int = 2048

    def validate(self) -> "TKPFConfig":
        for name in ("a", "b", "r", "q", "d"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"TKPF parameter {name} must be a positive integer, got {value!r}")
        for name in ("a", "b", "d"):
            if getattr(self, name) % self.r:
                raise ConfigError(
                    f"TKPF requires r to divide {name}: {name}={getattr(self, name)}, r={self.r}"
                )
        return self

    @property
    def output_dim(self) -> int:
        return self.a * self.b

    @property
    def a_hat_shape(self) -> tuple[int, int]:
        return self.a // self.r, self.d // self.r

    @property
    def b_hat_shape(self) -> tuple[int, int]:
        return self.b // self.r, self.d // self.r


def tkpf_parameter_count(cfg: TKPFConfig) -> int:
    """Number of learned scalars across all ``q`` branches."""
    cfg.validate()
    (ar, dr), (br, _) = cfg.a_hat_shape, cfg.b_hat_shape
    return cfg.q * (ar * dr + br * dr)


def _check_factor_shapes(cfg: TKPFConfig, a_hat, b_hat) -> None:
    cfg.validate()
    if tuple(a_hat.shape[-2:]) != cfg.a_hat_shape:
        raise ConfigError(
            f"A_hat must have shape (a/r, d/r) = {cfg.a_hat_shape}, got {tuple(a_hat.shape)}"
        )
    if tuple(b_hat.shape[-2:]) != cfg.b_hat_shape:
        raise ConfigError(
            f"B_hat must have shape (b/r, d/r) = {cfg.b_hat_shape}, got {tuple(b_hat.shape)}"
        )


def build_projection_matrices(cfg: TKPFConfig, a_hat, b_hat) -> tuple[np.ndarray, np.ndarray]:
    """Expand the factors to ``A = I_r kron A_hat`` and ``B = B_hat kron I_r``.

    Test and oracle use only; the training path never materializes these.
    """
    _check_factor_shapes(cfg, a_hat, b_hat)
    a_hat = np.asarray(_to_numpy(a_hat), dtype=np.float64)
    b_hat = np.asarray(_to_numpy(b_hat), dtype=np.float64)
    eye = np.eye(cfg.r)
    return np.kron(eye, a_hat), np.kron(b_hat, eye)


def brute_force_bilinear_projection(X, A, B, max_dim: int = 64) -> np.ndarray:
    """Literal ``(A kron B) vec(X X^T)`` in float64.

    Materializes both the outer product and the Kronecker product, so it
    refuses inputs with more than ``max_dim`` channels.
    """
    X, A, B = (np.asarray(_to_numpy(m), dtype=np.float64) for m in (X, A, B))
    d = X.shape[0]
    if d > max_dim:
        raise ValueError(f"brute-force oracle limited to d <= {max_dim}, got d={d}")
    if A.shape[1] != d or B.shape[1] != d:
        raise ValueError(f"A and B need {d} columns, got {A.shape} and {B.shape}")
    outer = X @ X.T
    return np.kron(A, B) @ outer.reshape(-1, order="F")


def _to_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return x


def tkpf_branch_forward(X: torch.Tensor, a_hat: torch.Tensor, b_hat: torch.Tensor,
                        cfg: TKPFConfig) -> torch.Tensor:
    """Projected bilinear feature of one branch.

    Args:
        X: features of shape ``(..., d, N)``.
        a_hat: ``(a/r, d/r)`` factor.
        b_hat: ``(b/r, d/r)`` factor.

    Returns:
        Tensor of shape ``(..., a*b)`` holding ``vec(S T^T)``.
    """
    _check_factor_shapes(cfg, a_hat, b_hat)
    *lead, d, n = X.shape
    if d != cfg.d:
        raise ConfigError(f"feature map has {d} channels, TKPF configured for d={cfg.d}")
    r, dr = cfg.r, cfg.d // cfg.r

    # channel c = block * (d/r) + j; A_hat mixes j inside each block
    x_a = X.reshape(*lead, r, dr, n)
    T = torch.einsum("mj,...ijn->...imn", a_hat, x_a).reshape(*lead, cfg.a, n)
    # channel c = j * r + l; B_hat mixes j across blocks at fixed l
    x_b = X.reshape(*lead, dr, r, n)
    S = torch.einsum("mj,...jln->...mln", b_hat, x_b).reshape(*lead, cfg.b, n)

    # vec(S T^T) column-major == row-major flatten of T S^T
    return (T @ S.transpose(-1, -2)).reshape(*lead, cfg.a * cfg.b)


def signed_sqrt_l2_normalize(v: torch.Tensor) -> torch.Tensor:
    """``sign(v) * sqrt(|v|)`` followed by L2 normalization over the last axis."""
    w = torch.sign(v) * torch.sqrt(torch.abs(v).clamp_min(_SQRT_FLOOR))
    return F.normalize(w, p=2.0, dim=-1, eps=L2_EPS)


def tkpf_pool(X: torch.Tensor, branches: Sequence[tuple[torch.Tensor, torch.Tensor]],
              cfg: TKPFConfig) -> torch.Tensor:
    """Average of the normalized branch features.

    Each ``(a_hat, b_hat)`` pair is one branch; normalization happens per
    branch, before averaging.
    """
    if len(branches) == 0:
        raise ConfigError("tkpf_pool needs at least one branch (q >= 1)")
    if len(branches) != cfg.q:
        raise ConfigError(f"expected q={cfg.q} branches, got {len(branches)}")
    outputs = []
    for i, (a_hat, b_hat) in enumerate(branches):
        raw = tkpf_branch_forward(X, a_hat, b_hat, cfg)
        if not torch.isfinite(raw).all():
            raise NonFiniteError(f"non-finite bilinear feature in TKPF branch {i}")
        outputs.append(signed_sqrt_l2_normalize(raw))
    return torch.stack(outputs, dim=0).mean(dim=0)


class TKPFPooling(nn.Module):
    """Drop-in replacement for global average pooling on ``(B, d, h, w)`` maps."""

    def __init__(self, cfg: TKPFConfig):
        super().__init__()
        self.cfg = cfg.validate()
        std = math.sqrt(2.0 / (cfg.d // cfg.r))
        self.a_hat = nn.Parameter(torch.randn(cfg.q, *cfg.a_hat_shape) * std)
        self.b_hat = nn.Parameter(torch.randn(cfg.q, *cfg.b_hat_shape) * std)

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def branches(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [(self.a_hat[i], self.b_hat[i]) for i in range(self.cfg.q)]

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        X = feature_map.flatten(start_dim=2)
        return tkpf_pool(X, self.branches(), self.cfg)

    def extra_repr(self) -> str:
        c = self.cfg
        return f"a={c.a}, b={c.b}, r={c.r}, q={c.q}, d={c.d}"
