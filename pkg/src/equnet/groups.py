"""Discrete planar symmetry groups C1, C4, C8 and D4.

An element ``(r, flip)`` stands for ``F^flip . R^r``: rotate counter-clockwise
by ``r * 360/n`` degrees, then (if ``flip``) mirror left-right.  Elements are
listed rotations first, then flipped rotations, each ascending in ``r``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

GROUP_KINDS = ("c1", "c4", "c8", "d4")
FAMILY_TO_GROUP = {"vanilla": "c1", "c4": "c4", "c8": "c8", "d4": "d4"}


class GroupError(ValueError):
    pass


class UnsupportedActionError(GroupError):
    """An element with no exact action on the pixel grid was applied to a feature map."""


@dataclass(frozen=True)
class GroupElement:
    r: int
    flip: bool
    kind: str

    @property
    def n_rot(self) -> int:
        return _N_ROT[self.kind]

    @property
    def angle(self) -> float:
        """Rotation angle in degrees."""
        return 360.0 * self.r / self.n_rot

    @property
    def is_grid_exact(self) -> bool:
        """True when the element maps the square pixel grid onto itself."""
        return (4 * self.r) % self.n_rot == 0

    def __repr__(self) -> str:
        return f"{self.kind}:{'f' if self.flip else ''}r{int(round(self.angle))}"


_N_ROT = {"c1": 1, "c4": 4, "c8": 8, "d4": 4}


class SymmetryGroup:
    """Immutable finite group with a fixed element order."""

    def __init__(self, kind: str):
        kind = FAMILY_TO_GROUP.get(kind, kind)
        if kind not in GROUP_KINDS:
            raise GroupError(f"unknown group kind {kind!r}")
        self.kind = kind
        n = _N_ROT[kind]
        flips = (False, True) if kind == "d4" else (False,)
        self.elements: tuple[GroupElement, ...] = tuple(
            GroupElement(r, f, kind) for f in flips for r in range(n)
        )
        self._index = {e: i for i, e in enumerate(self.elements)}

    @property
    def order(self) -> int:
        return len(self.elements)

    @property
    def identity(self) -> GroupElement:
        return self.elements[0]

    def __len__(self) -> int:
        return self.order

    def __iter__(self):
        return iter(self.elements)

    def __repr__(self) -> str:
        return f"SymmetryGroup({self.kind!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, SymmetryGroup) and other.kind == self.kind

    def __hash__(self) -> int:
        return hash(self.kind)

    def index(self, g: GroupElement) -> int:
        try:
            return self._index[g]
        except KeyError:
            raise GroupError(f"{g!r} is not an element of {self.kind}") from None

    def element(self, r: int, flip: bool = False) -> GroupElement:
        return self.elements[self.index(GroupElement(r % _N_ROT[self.kind], flip, self.kind))]

    def compose(self, g: GroupElement, h: GroupElement) -> GroupElement:
        return compose(g, h)

    def inverse(self, g: GroupElement) -> GroupElement:
        return inverse(g)

    def exact_elements(self) -> list[GroupElement]:
        return [g for g in self.elements if g.is_grid_exact]

    def cayley_table(self) -> np.ndarray:
        n = self.order
        return np.array(
            [[self.index(compose(g, h)) for h in self.elements] for g in self.elements]
        ).reshape(n, n)


def compose(g: GroupElement, h: GroupElement) -> GroupElement:
    """``g . h``: apply ``h`` first, then ``g``."""
    if g.kind != h.kind:
        raise GroupError(f"cannot compose elements of {g.kind} and {h.kind}")
    n = g.n_rot
    # F^a R^r F^b R^s = F^(a^b) R^(s + (-1)^b r)
    r = (h.r - g.r if h.flip else h.r + g.r) % n
    return GroupElement(r, g.flip != h.flip, g.kind)


def inverse(g: GroupElement) -> GroupElement:
    if g.flip:
        return g
    return GroupElement((-g.r) % g.n_rot, False, g.kind)


def regular_rep_perm(g: GroupElement, group: SymmetryGroup | None = None) -> np.ndarray:
    """Permutation ``p`` with ``p[index(h)] = index(g . h)``."""
    group = group or SymmetryGroup(g.kind)
    return np.array([group.index(compose(g, h)) for h in group.elements], dtype=np.intp)


def permute_group_axis(x: np.ndarray, g: GroupElement, axis: int = 2,
                       group: SymmetryGroup | None = None) -> np.ndarray:
    """Move the slice at group index ``h`` to index ``g.h``."""
    perm = regular_rep_perm(g, group)
    src = np.argsort(perm)
    return np.take(x, src, axis=axis)


# -- spatial actions --------------------------------------------------------

def _quarter_turns(g: GroupElement) -> int:
    return (4 * g.r) // g.n_rot


def act_on_feature_map(g: GroupElement, x: np.ndarray) -> np.ndarray:
    """Exact pixel permutation on the last two axes (square maps only)."""
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"feature-map action needs square maps, got {x.shape[-2:]}")
    if not g.is_grid_exact:
        raise UnsupportedActionError(f"{g!r} has no exact action on the pixel grid")
    out = np.rot90(x, _quarter_turns(g), axes=(-2, -1))
    if g.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


@lru_cache(maxsize=None)
def rotation_matrix(k: int, degrees: float) -> np.ndarray:
    """[k*k, k*k] bilinear resampling map rotating a k x k kernel CCW about its centre.

    Samples outside the kernel support read as zero.
    """
    c = (k - 1) / 2.0
    th = np.deg2rad(degrees)
    cos, sin = np.cos(th), np.sin(th)
    m = np.zeros((k * k, k * k))
    for i in range(k):
        for j in range(k):
            x, y = j - c, c - i
            # output(p) = input(R^-1 p)
            xs = cos * x + sin * y
            ys = -sin * x + cos * y
            js, is_ = xs + c, c - ys
            i0, j0 = int(np.floor(is_)), int(np.floor(js))
            fi, fj = is_ - i0, js - j0
            for di, wi in ((0, 1 - fi), (1, fi)):
                for dj, wj in ((0, 1 - fj), (1, fj)):
                    ii, jj = i0 + di, j0 + dj
                    wgt = wi * wj
                    if 0 <= ii < k and 0 <= jj < k and wgt > 1e-12:
                        m[i * k + j, ii * k + jj] += wgt
    m.setflags(write=False)
    return m


def _odd_step_degrees(g: GroupElement) -> float:
    return 360.0 / g.n_rot


def act_on_kernel(g: GroupElement, k: np.ndarray) -> np.ndarray:
    """Rotate/flip kernels on the last two axes.

    Quarter turns and flips permute entries exactly.  For C8 odd rotations
    the kernel is first resampled by one 45 degree step, then turned.
    """
    size = k.shape[-1]
    if k.shape[-2] != size:
        raise ValueError("kernels must be square")
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    out = k
    if not g.is_grid_exact:
        m = rotation_matrix(size, _odd_step_degrees(g)).astype(k.dtype, copy=False)
        flat = k.reshape(*k.shape[:-2], size * size)
        out = (flat @ m.T).reshape(k.shape)
    out = np.rot90(out, _quarter_turns(g), axes=(-2, -1))
    if g.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def act_on_kernel_adjoint(g: GroupElement, k: np.ndarray) -> np.ndarray:
    """Transpose of the linear map :func:`act_on_kernel` (used in backprop)."""
    size = k.shape[-1]
    out = k[..., ::-1] if g.flip else k
    out = np.rot90(out, -_quarter_turns(g), axes=(-2, -1))
    if not g.is_grid_exact:
        m = rotation_matrix(size, _odd_step_degrees(g)).astype(k.dtype, copy=False)
        flat = np.ascontiguousarray(out).reshape(*k.shape[:-2], size * size)
        out = (flat @ m).reshape(k.shape)
    return np.ascontiguousarray(out)

