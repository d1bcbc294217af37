"""Input checks shared by the estimator, the harness and the CLI."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .exceptions import InvalidGaussianError, InvalidInputError
from .scene import GaussianSet, GridSpec, VoxelGrid, validate_set


def check_gaussian_set(G, *, d: int | None = None, F: int | None = None) -> GaussianSet:
    """Return ``G`` if it is a valid GaussianSet, else raise with the first violations."""
    if not isinstance(G, GaussianSet):
        raise InvalidInputError(f"expected a GaussianSet, got {type(G).__name__}")
    if G.N == 0:
        raise InvalidInputError("GaussianSet is empty")
    if d is not None and G.d != d:
        raise InvalidInputError(f"expected d={d} semantic classes, got {G.d}")
    if F is not None and G.F != F:
        raise InvalidInputError(f"expected F={F} feature channels, got {G.F}")
    problems = validate_set(G)
    if problems:
        shown = ", ".join(f"#{i}: {what}" for i, what in problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        raise InvalidGaussianError(f"{len(problems)} invariant violations: {shown}{more}")
    return G


def check_grid(grid, d: int | None = None, spec: GridSpec | None = None) -> VoxelGrid:
    if not isinstance(grid, VoxelGrid):
        raise InvalidInputError(f"expected a VoxelGrid, got {type(grid).__name__}")
    if d is not None:
        grid.check_classes(d)
    if spec is not None and grid.spec != spec:
        raise InvalidInputError("grid spec differs from the expected spec")
    return grid


def as_list(X) -> tuple[list, bool]:
    """Wrap a single item in a list; report whether it was wrapped."""
    if isinstance(X, (GaussianSet, VoxelGrid)):
        return [X], True
    if isinstance(X, Sequence) and not isinstance(X, (str, bytes, np.ndarray)):
        return list(X), False
    raise InvalidInputError(f"expected a GaussianSet or a sequence of them, got {type(X).__name__}")


def check_scenes(X, y, d: int) -> list:
    """Pair Gaussian sets with ground-truth grids after validating both."""
    Xs, _ = as_list(X)
    ys, _ = as_list(y)
    if len(Xs) != len(ys):
        raise InvalidInputError(f"{len(Xs)} Gaussian sets but {len(ys)} grids")
    if not Xs:
        raise InvalidInputError("need at least one scene")
    F = Xs[0].F if isinstance(Xs[0], GaussianSet) else None
    return [(check_gaussian_set(G, d=d, F=F), check_grid(g, d)) for G, g in zip(Xs, ys)]
