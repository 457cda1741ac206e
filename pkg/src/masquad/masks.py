"""Attention mask construction for the team transformer.

Tokens are laid out timestep-major: token(t, u) = t * N + u for timesteps
t in [0, L) and units u in [0, N). Three mask families:

* base: block-causal — every token attends to all units at its own and
  earlier timesteps, never to later ones.
* training: the base mask with non-self (query-unit, key-unit, key-timestep)
  entries independently dropped at a given ratio. Whether unit i can see
  unit j's state at time t' is one coin flip, shared by every query timestep.
* local: restricted to what each unit could actually see at the key's
  timestep — the decentralized-execution mask.

Self entries (a unit attending to its own history) are never dropped, so no
row can end up fully masked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MaskBuildError(ValueError):
    """Invalid arguments to a mask builder."""


@dataclass(frozen=True)
class AttentionMask:
    """Boolean (L*N) x (L*N) gate; row = query token, column = key token."""

    L: int
    N: int
    allow: np.ndarray

    def validate(self) -> None:
        L, N, a = self.L, self.N, self.allow
        if a.shape != (L * N, L * N) or a.dtype != np.bool_:
            raise MaskBuildError(f"allow must be bool ({L * N}, {L * N}), got {a.shape} {a.dtype}")
        grid = a.reshape(L, N, L, N)
        tq = np.arange(L)[:, None, None, None]
        tk = np.arange(L)[None, None, :, None]
        if (grid & (tk > tq)).any():
            raise MaskBuildError("mask allows attention to a future timestep")
        diag = a[np.arange(L * N), np.arange(L * N)]
        if not diag.all():
            raise MaskBuildError("mask drops a self entry")


@dataclass(frozen=True)
class VisibilitySet:
    """visible[t, i, j] — unit i could observe unit j at timestep t."""

    L: int
    N: int
    visible: np.ndarray

    def validate(self) -> None:
        if self.visible.shape != (self.L, self.N, self.N) or self.visible.dtype != np.bool_:
            raise MaskBuildError(
                f"visible must be bool ({self.L}, {self.N}, {self.N}), got {self.visible.shape}")
        diag = self.visible[:, np.arange(self.N), np.arange(self.N)]
        if not diag.all():
            raise MaskBuildError("a unit must always be visible to itself")

    @classmethod
    def from_sets(cls, L: int, N: int, sets) -> "VisibilitySet":
        """Build from an [L][N] nesting of index collections."""
        vis = np.zeros((L, N, N), dtype=bool)
        for t in range(L):
            for i in range(N):
                for j in sets[t][i]:
                    if not 0 <= j < N:
                        raise MaskBuildError(f"visibility index {j} out of range (N={N})")
                    vis[t, i, j] = True
        out = cls(L, N, vis)
        out.validate()
        return out


def build_base_mask(L: int, N: int) -> AttentionMask:
    """Block-causal mask: attend to every unit at timesteps t' <= t."""
    if L < 1 or N < 1:
        raise MaskBuildError(f"L and N must be >= 1, got L={L}, N={N}")
    tq = np.arange(L)
    block = (tq[None, :] <= tq[:, None])  # [L, L] key-time <= query-time
    allow = np.kron(block, np.ones((N, N), dtype=bool))
    return AttentionMask(L, N, allow)


def sample_training_mask(base: AttentionMask, ratio: float,
                         rng: np.random.Generator) -> AttentionMask:
    """Drop non-self entries of `base` independently per (i, j, t') at `ratio`."""
    if not 0.0 <= ratio <= 1.0:
        raise MaskBuildError(f"mask ratio must lie in [0, 1], got {ratio}")
    L, N = base.L, base.N
    # keep[i, t', j]: query unit i may see key unit j's state at time t'
    keep = rng.random((N, L, N)) >= ratio
    u = np.arange(N)
    keep[u, :, u] = True  # a unit always sees its own history
    grid = base.allow.reshape(L, N, L, N)
    out = grid & keep[None, :, :, :]
    return AttentionMask(L, N, out.reshape(L * N, L * N))


def sample_ratio(rng: np.random.Generator) -> float:
    """One uniform [0, 1] mask ratio; drawn once per training window."""
    return float(rng.random())


def build_local_mask(vis: VisibilitySet, L: int, N: int) -> AttentionMask:
    """Attend to unit j at time t' only if the query unit could see j then."""
    if vis.L != L or vis.N != N:
        raise MaskBuildError(f"visibility covers (L={vis.L}, N={vis.N}), need (L={L}, N={N})")
    vis.validate()
    tq = np.arange(L)
    causal = (tq[None, :] <= tq[:, None])  # [tq, tk]
    # allow[t, i, t', j] = causal[t, t'] and visible[t', i, j]
    grid = causal[:, None, :, None] & vis.visible.transpose(1, 0, 2)[None, :, :, :]
    return AttentionMask(L, N, grid.reshape(L * N, L * N))


def exclude_tokens(mask: AttentionMask, absent: np.ndarray) -> AttentionMask:
    """Cut absent tokens (padding / not-yet-inserted units) out of attention.

    An absent token keeps only its self entry; present tokens never attend to
    absent ones. `absent` is bool over flat token indices or an [L, N] grid.
    """
    absent = np.asarray(absent, dtype=bool).reshape(-1)
    T = mask.L * mask.N
    if absent.shape != (T,):
        raise MaskBuildError(f"absent flags must cover {T} tokens, got {absent.shape}")
    allow = mask.allow & ~absent[None, :] & ~absent[:, None]
    allow[np.arange(T), np.arange(T)] = True
    return AttentionMask(mask.L, mask.N, allow)
