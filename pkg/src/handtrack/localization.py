"""Root-heatmap post-processing: maxima, confidence gating, decay extrapolation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import Frame, RootLocation
from .errors import DepthHoleError, InvalidInputError

DEFAULT_DELTA = 0.98
CONF_THRESHOLD = 0.1
JUMP_THRESHOLD_PX = 30.0


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Grid of position likelihoods, ``values[row, col]``.

    Cell ``(col, row)`` maps to image pixel ``(col * scale, row * scale)``.
    """

    values: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim != 2 or v.size == 0:
            raise InvalidInputError("heatmap must be a non-empty 2D grid")
        if not self.scale > 0:
            raise InvalidInputError("heatmap scale must be positive")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def image_size(self) -> tuple[float, float]:
        rows, cols = self.values.shape
        return cols * self.scale, rows * self.scale


def argmax(heatmap: Heatmap) -> tuple[float, float, float]:
    """Image-space ``(u, v, likelihood)`` of the strongest cell.

    Ties go to the lowest row, then the lowest column (row-major order).
    """
    v = heatmap.values
    if np.all(np.isnan(v)):
        raise InvalidInputError("heatmap is all NaN")
    flat = np.nanargmax(v)
    row, col = divmod(int(flat), v.shape[1])
    return col * heatmap.scale, row * heatmap.scale, float(v[row, col])


def refined_peak(heatmap: Heatmap) -> tuple[float, float, float]:
    """Argmax with a sub-cell log-parabola fit along each axis.

    For a sampled Gaussian blob the fit recovers the centre exactly.  Border
    cells and non-positive neighbours fall back to the integer location on
    that axis.
    """
    u, v, like = argmax(heatmap)
    s = heatmap.scale
    row, col = int(round(v / s)), int(round(u / s))
    vals = heatmap.values
    rows, cols = vals.shape

    def offset(a, b, c):
        if a <= 0 or b <= 0 or c <= 0:
            return 0.0
        la, lb, lc = np.log(a), np.log(b), np.log(c)
        denom = la - 2 * lb + lc
        if denom >= 0:
            return 0.0
        return float(np.clip(0.5 * (la - lc) / denom, -0.5, 0.5))

    du = offset(vals[row, col - 1], vals[row, col], vals[row, col + 1]) if 0 < col < cols - 1 else 0.0
    dv = offset(vals[row - 1, col], vals[row, col], vals[row + 1, col]) if 0 < row < rows - 1 else 0.0
    return (col + du) * s, (row + dv) * s, like


@dataclass(frozen=True)
class LocalizerState:
    """History threaded through :func:`update_root`, one per stream.

    ``last_confident`` and ``prev_confident`` are the two most recent
    confident maxima, ``frames_since_confident`` is the decay exponent and
    ``previous_maximum`` the location output at the previous frame.
    """

    last_confident: tuple[float, float] | None = None
    prev_confident: tuple[float, float] | None = None
    frames_since_confident: int = 0
    previous_maximum: tuple[float, float] | None = None
    delta: float = DEFAULT_DELTA
    conf_threshold: float = CONF_THRESHOLD
    jump_threshold: float = JUMP_THRESHOLD_PX

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise InvalidInputError("decay factor must lie in (0, 1]")
        if self.frames_since_confident < 0:
            raise InvalidInputError("frames_since_confident must be >= 0")

    @property
    def initialized(self) -> bool:
        return self.previous_maximum is not None


def is_uncertain(state: LocalizerState, uv, likelihood: float) -> bool:
    """Low likelihood *and* a large jump from the previous maximum."""
    jump = np.hypot(uv[0] - state.previous_maximum[0], uv[1] - state.previous_maximum[1])
    return likelihood < state.conf_threshold and jump > state.jump_threshold


def update_root(state: LocalizerState, heatmap: Heatmap) -> tuple[RootLocation, LocalizerState]:
    """Process one root heatmap and return the 2D root plus the next state.

    Uncertain maxima are replaced by a step of length ``delta**k`` from the
    previous output along the direction of the last confident motion.  The
    returned location has ``z = 0``; resolve depth with
    :func:`root_depth_lookup`.
    """
    u, v, like = argmax(heatmap)
    raw = (u, v)
    if not state.initialized:
        new = replace(state, last_confident=raw, prev_confident=raw,
                      frames_since_confident=0, previous_maximum=raw)
        return RootLocation(u, v, 0.0, like), new

    if not is_uncertain(state, raw, like):
        new = replace(state, last_confident=raw, prev_confident=state.last_confident,
                      frames_since_confident=0, previous_maximum=raw)
        return RootLocation(u, v, 0.0, like), new

    k = state.frames_since_confident + 1
    direction = np.subtract(state.last_confident, state.prev_confident)
    norm = np.linalg.norm(direction)
    prev = np.asarray(state.previous_maximum, float)
    if norm == 0:
        phi = prev
    else:
        phi = prev + state.delta**k * direction / norm
    phi = (float(phi[0]), float(phi[1]))
    new = replace(state, frames_since_confident=k, previous_maximum=phi)
    width, height = heatmap.image_size
    uc = min(max(phi[0], 0.0), width - 1)
    vc = min(max(phi[1], 0.0), height - 1)
    return RootLocation(uc, vc, 0.0, like), new


def root_depth_lookup(frame: Frame | np.ndarray, uv, window: int = 5) -> float:
    """Depth (mm) at pixel ``uv``, or the median of valid depths in a window around it."""
    depth = frame.depth if isinstance(frame, Frame) else np.asarray(frame)
    H, W = depth.shape
    u, v = int(np.floor(uv[0] + 0.5)), int(np.floor(uv[1] + 0.5))
    if not (0 <= u < W and 0 <= v < H):
        raise InvalidInputError(f"pixel {(u, v)} outside the {W}x{H} image")
    z = float(depth[v, u])
    if z > 0:
        return z
    h = window // 2
    patch = depth[max(v - h, 0): v + h + 1, max(u - h, 0): u + h + 1]
    valid = patch[patch > 0]
    if valid.size == 0:
        raise DepthHoleError(f"no valid depth within {window}x{window} of {(u, v)}")
    return float(np.median(valid))
