"""Adam, uniform-preconditioned Adam and the Laplacian smooth reparameterization.

Steps are functional: they take the parameter, its gradient and a
:class:`Moments` record and return new values, so a fit loop owns all state
and reruns are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch

from .geometry import TriMesh, graph_laplacian


class OptimizerError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    """``constant`` or ``exponential`` decay from ``start`` to ``end`` over ``steps`` (held after)."""

    kind: str = "constant"
    start: float = 3e-2
    end: float = 3e-2
    steps: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "exponential"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.start <= 0 or self.end <= 0:
            raise ValueError("learning rates must be positive")

    def __call__(self, step: int) -> float:
        if self.kind == "constant":
            return self.start
        frac = min(max(step, 0), self.steps) / max(self.steps, 1)
        return self.start * (self.end / self.start) ** frac

    def to_dict(self) -> dict:
        return {"kind": self.kind, "start": self.start, "end": self.end, "steps": self.steps}


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # adam | adam_uniform
    lr: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: Optional[LrSchedule] = None  # overrides lr when given

    def __post_init__(self):
        if self.kind not in ("adam", "adam_uniform"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def lr_at(self, step: int) -> float:
        return self.schedule(step) if self.schedule is not None else self.lr

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        d["schedule"] = None if self.schedule is None else self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        if d.get("schedule") is not None:
            d["schedule"] = LrSchedule(**d["schedule"])
        return cls(**d)


@dataclass
class Moments:
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0

    @classmethod
    def zeros_like(cls, x: torch.Tensor) -> "Moments":
        return cls(torch.zeros_like(x), torch.zeros_like(x), 0)


def _check(g: torch.Tensor):
    if not bool(torch.isfinite(g).all()):
        raise OptimizerError("non-finite gradient")


def adam_step(x: torch.Tensor, g: torch.Tensor, mom: Moments, cfg: OptimizerConfig,
              lr: Optional[float] = None) -> tuple[torch.Tensor, Moments]:
    """Bias-corrected Adam; a zero gradient leaves ``x`` untouched."""
    _check(g)
    lr = cfg.lr_at(mom.t) if lr is None else lr
    t = mom.t + 1
    m = cfg.beta1 * mom.m + (1 - cfg.beta1) * g
    v = cfg.beta2 * mom.v + (1 - cfg.beta2) * g * g
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    return x - lr * m_hat / (torch.sqrt(v_hat) + cfg.eps), Moments(m, v, t)


def adam_uniform_step(x: torch.Tensor, g: torch.Tensor, mom: Moments, cfg: OptimizerConfig,
                      lr: Optional[float] = None, block_dims: Optional[tuple] = None) -> tuple[torch.Tensor, Moments]:
    """Adam whose second moment is the max of the EMA over a block, so steps keep the gradient direction.

    ``block_dims=None`` treats the whole tensor as one block; ``(1,)`` on an
    (N, 3) array gives one block per vertex.
    """
    _check(g)
    lr = cfg.lr_at(mom.t) if lr is None else lr
    t = mom.t + 1
    m = cfg.beta1 * mom.m + (1 - cfg.beta1) * g
    v = cfg.beta2 * mom.v + (1 - cfg.beta2) * g * g
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    if block_dims is None:
        denom = v_hat.max() if v_hat.numel() else v_hat.sum()
    else:
        denom = v_hat.amax(dim=block_dims, keepdim=True)
    return x - lr * m_hat / (torch.sqrt(denom) + cfg.eps), Moments(m, v, t)


def step(x, g, mom, cfg: OptimizerConfig, lr=None):
    fn = adam_uniform_step if cfg.kind == "adam_uniform" else adam_step
    return fn(x, g, mom, cfg, lr)


# ---------------------------------------------------------------------------
# smooth reparameterization u = (I + lam L) v


class _Solve(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, rep):
        ctx.rep = rep
        return torch.from_numpy(rep.solve(u.detach().numpy()))

    @staticmethod
    def backward(ctx, g):
        # the system matrix is symmetric, so the adjoint is another solve
        return torch.from_numpy(ctx.rep.solve(g.detach().numpy())), None


@dataclass(eq=False)
class SmoothReparam:
    laplacian: sp.csr_matrix
    lam: float = 19.0
    tol: float = 1e-10
    _system: sp.csc_matrix = field(init=False, repr=False)
    _lu: object = field(init=False, repr=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        n = self.laplacian.shape[0]
        self._system = (sp.identity(n, format="csc") + self.lam * sp.csc_matrix(self.laplacian)).tocsc()
        self._lu = spla.splu(self._system)

    @classmethod
    def from_mesh(cls, mesh: TriMesh, lam: float = 19.0) -> "SmoothReparam":
        return cls(graph_laplacian(mesh), lam)

    @property
    def n(self) -> int:
        return self._system.shape[0]

    def matrix(self) -> sp.csc_matrix:
        return self._system

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        x = self._lu.solve(np.ascontiguousarray(b))
        res = np.linalg.norm(self._system @ x - b)
        scale = max(np.linalg.norm(b), 1e-300)
        if not np.isfinite(x).all() or res > self.tol * scale:
            raise OptimizerError(f"reparameterization solve did not converge (residual {res / scale:.3e})")
        return x

    def to_latent(self, vertices) -> np.ndarray:
        """u = (I + lam L) v."""
        return self._system @ np.asarray(vertices, dtype=np.float64)

    def push(self, u):
        """Vertices from latent: v = (I + lam L)^-1 u (differentiable for torch input)."""
        if isinstance(u, torch.Tensor):
            return _Solve.apply(u, self)
        return self.solve(u)

    def pullback(self, vertex_grads) -> np.ndarray:
        """Latent-domain gradient: (I + lam L)^-1 dE/dv."""
        return self.solve(vertex_grads)


def reparam_push(rep: SmoothReparam, latent):
    return rep.push(latent)


def reparam_pullback(rep: SmoothReparam, vertex_grads):
    return rep.pullback(vertex_grads)


def smoothing_window(trace, window: int = 10) -> np.ndarray:
    """Trailing moving average, used for "non-increasing after smoothing" checks."""
    a = np.asarray(trace, dtype=np.float64)
    if len(a) < window:
        return a.copy()
    c = np.cumsum(np.concatenate([[0.0], a]))
    return (c[window:] - c[:-window]) / window


__all__ = ["LrSchedule", "OptimizerConfig", "Moments", "OptimizerError", "adam_step", "adam_uniform_step", "step",
           "SmoothReparam", "reparam_push", "reparam_pullback", "smoothing_window"]
