"""Frame-to-frame homography alignment.

Minimises the photometric SSD between the warped previous image and the
current image plus a quadratic pull towards the IMU prior,

    f(p) = sum_j (I(T(x'_j; p)) - I'(x'_j))^2 + (p - p0)^T W (p - p0),

with forward-additive Gauss-Newton over ``p = [t; r]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from downvio.fusion import AhrsAttitude, EkfState, Extrinsics
from downvio.geometry import (
    CameraIntrinsics,
    PlaneNormal,
    WarpParams,
    matrix_to_rodrigues,
    rodrigues_derivatives,
    rodrigues_to_matrix,
)
from downvio.imgproc import (
    BORDER_MARGIN,
    GrayImage,
    PixelSet,
    downsample,
    gradient,
    sample_many,
    sample_with_gradient,
    select_pixels,
)


class FailureReason(str, enum.Enum):
    TOO_FEW_PIXELS = "too_few_pixels"
    DIVERGED = "diverged"
    MAX_ITERS = "max_iters"


class InsufficientOverlapError(RuntimeError):
    """Too few evaluation pixels stay inside the previous image."""


def _default_w() -> tuple[float, ...]:
    return (0.0, 0.0, 0.0, 1e3, 1e3, 1e3)


@dataclass(frozen=True)
class AlignConfig:
    w_diag: tuple[float, ...] = field(default_factory=_default_w)
    max_iters: int = 30
    step_tol: float = 1e-6
    cost_tol: float = 1e-7
    min_pixels: int = 50
    max_residual_drop_fraction: float = 0.5
    pixel_budget: int = 2000
    grad_threshold: float = 0.005
    pyramid: bool = False
    velocity_prior: bool = True

    def __post_init__(self) -> None:
        w = tuple(float(v) for v in self.w_diag)
        if len(w) != 6 or any(v < 0 for v in w):
            raise ValueError("w_diag must be six non-negative weights")
        object.__setattr__(self, "w_diag", w)
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_tol <= 0 or self.cost_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 <= self.max_residual_drop_fraction <= 1.0:
            raise ValueError("max_residual_drop_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class AlignPrior:
    p0: WarpParams = field(default_factory=WarpParams)


@dataclass(frozen=True)
class AlignResult:
    p: WarpParams
    iterations: int
    final_cost: float
    pixels_used: int
    converged: bool
    failure_reason: FailureReason | None = None


class PhotometricProblem:
    """Residuals and Jacobian of the warped-previous minus current intensities.

    Quantities that depend only on the current image and the selected pixels
    are computed once.
    """

    def __init__(
        self,
        prev: GrayImage,
        curr: GrayImage,
        pixels: PixelSet,
        k: CameraIntrinsics,
        n: PlaneNormal,
    ) -> None:
        if prev.data.shape != curr.data.shape:
            raise ValueError("images must have identical dimensions")
        self.prev = prev.data
        self.k = k
        self.n = n.vector
        xs, ys = pixels.xs, pixels.ys
        self.xs, self.ys = xs, ys
        self.target = sample_many(curr.data, xs, ys)
        kinv = k.inverse
        self.rays = np.column_stack(
            [kinv[0, 0] * xs + kinv[0, 2], kinv[1, 1] * ys + kinv[1, 2], np.ones_like(xs)]
        )
        self.plane = self.rays @ self.n
        h, w = self.prev.shape
        self.lo = float(BORDER_MARGIN)
        self.hi_x = float(w - 1 - BORDER_MARGIN)
        self.hi_y = float(h - 1 - BORDER_MARGIN)

    def __len__(self) -> int:
        return self.target.size

    def evaluate(self, p, with_jacobian: bool = True, active: np.ndarray | None = None):
        """Return ``(residuals, jacobian, kept_mask)`` at parameters ``p``.

        ``active`` optionally restricts evaluation to a subset of the pixels.
        """
        p = np.asarray(p, dtype=np.float64)
        t, r = p[:3], p[3:6]
        rot = rodrigues_to_matrix(r)
        m = self.rays @ rot.T + np.outer(self.plane, t)
        mz = m[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_z = 1.0 / mz
            # written as a displacement so that p = 0 maps every pixel onto itself exactly
            x = self.xs + self.k.fx * (m[:, 0] * inv_z - self.rays[:, 0])
            y = self.ys + self.k.fy * (m[:, 1] * inv_z - self.rays[:, 1])
        kept = (
            (mz > 0)
            & (x >= self.lo)
            & (x <= self.hi_x)
            & (y >= self.lo)
            & (y <= self.hi_y)
        )
        if active is not None:
            kept &= active
        x, y = x[kept], y[kept]
        values, gx, gy = sample_with_gradient(self.prev, x, y)
        res = values - self.target[kept]
        if not with_jacobian:
            return res, None, kept

        iz = inv_z[kept]
        mk = m[kept]
        a = gx * self.k.fx * iz
        b = gy * self.k.fy * iz
        c = -(a * mk[:, 0] + b * mk[:, 1]) * iz
        dim = np.column_stack([a, b, c])
        jac = np.empty((res.size, 6))
        jac[:, :3] = dim * self.plane[kept, None]
        # rays rotated by each dR/dr_i at once: (N, 3 derivatives, 3 components)
        turned = (self.rays[kept] @ rodrigues_derivatives(r).reshape(9, 3).T).reshape(-1, 3, 3)
        jac[:, 3:] = (turned * dim[:, None, :]).sum(axis=2)
        return res, jac, kept


def photometric_residuals(
    prev: GrayImage,
    curr: GrayImage,
    pixels: PixelSet,
    p: WarpParams,
    k: CameraIntrinsics,
    n: PlaneNormal,
    min_pixels: int = 1,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Residual vector, ``N x 6`` Jacobian and number of pixels kept.

    Pixels whose warped location leaves the image are dropped.

    Raises
    ------
    InsufficientOverlapError
        If fewer than ``min_pixels`` pixels remain.
    """
    res, jac, kept = PhotometricProblem(prev, curr, pixels, k, n).evaluate(p.vector)
    if res.size < min_pixels:
        raise InsufficientOverlapError(f"only {res.size} pixels inside the previous image")
    return res, jac, int(res.size)


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None
    return np.linalg.solve(chol.T, np.linalg.solve(chol, b))


def _gauss_newton(
    problem: PhotometricProblem,
    p0: np.ndarray,
    p_start: np.ndarray,
    cfg: AlignConfig,
) -> tuple[np.ndarray, int, float, int, bool, FailureReason | None]:
    w = np.diag(cfg.w_diag)
    n_total = len(problem)
    min_kept = max(cfg.min_pixels, math.ceil((1.0 - cfg.max_residual_drop_fraction) * n_total))
    if n_total < cfg.min_pixels:
        return p0, 0, math.inf, n_total, False, FailureReason.TOO_FEW_PIXELS

    p = p_start.copy()
    best_p, best_cost, best_used = p.copy(), math.inf, 0
    prev_cost = None
    increases = 0
    # a pixel that leaves the image stays out; letting it re-enter can make
    # the iteration cycle between two pixel sets
    active = None
    for it in range(1, cfg.max_iters + 1):
        res, jac, active = problem.evaluate(p, active=active)
        used = res.size
        if used < min_kept:
            if math.isfinite(best_cost):
                return best_p, it, best_cost, used, False, FailureReason.TOO_FEW_PIXELS
            return p0, it, math.inf, used, False, FailureReason.TOO_FEW_PIXELS
        dp_prior = p - p0
        cost = float(res @ res + dp_prior @ (w @ dp_prior))
        if cost < best_cost:
            best_p, best_cost, best_used = p.copy(), cost, used

        if prev_cost is not None:
            if prev_cost <= 0.0:
                return best_p, it, best_cost, best_used, True, None
            rel = (prev_cost - cost) / prev_cost
            if abs(rel) < cfg.cost_tol:
                return best_p, it, best_cost, best_used, True, None
            increases = increases + 1 if rel < 0 else 0
            if increases >= 3:
                return p0, it, best_cost, best_used, False, FailureReason.DIVERGED
        prev_cost = cost

        hess = jac.T @ jac + w
        rhs = -(jac.T @ res) - w @ dp_prior
        dp = _solve_spd(hess, rhs)
        if dp is None or not np.all(np.isfinite(dp)):
            return p0, it, best_cost, best_used, False, FailureReason.DIVERGED
        if float(np.linalg.norm(dp)) < cfg.step_tol:
            return best_p, it, best_cost, best_used, True, None
        p = p + dp
    return best_p, cfg.max_iters, best_cost, best_used, False, FailureReason.MAX_ITERS


def gauss_newton_align(
    prev: GrayImage,
    curr: GrayImage,
    prior: AlignPrior,
    cfg: AlignConfig,
    k: CameraIntrinsics,
    n: PlaneNormal,
    pixels: PixelSet | None = None,
) -> AlignResult:
    """Estimate the warp taking current-image pixels into the previous image.

    Iterates from the prior and returns the lowest-cost iterate. Evaluation
    pixels are selected on ``curr`` unless given explicitly.
    """
    p0 = prior.p0.vector
    p_start = p0
    if cfg.pyramid and pixels is None:
        coarse_prev, coarse_curr = downsample(prev), downsample(curr)
        coarse_cfg = AlignConfig(
            **{**cfg.__dict__, "pyramid": False, "pixel_budget": max(1, cfg.pixel_budget // 4)}
        )
        coarse = gauss_newton_align(coarse_prev, coarse_curr, prior, coarse_cfg, k.scaled(0.5), n)
        if coarse.converged:
            p_start = coarse.p.vector

    if pixels is None:
        pixels = select_pixels(gradient(curr), cfg.pixel_budget, cfg.grad_threshold)
    problem = PhotometricProblem(prev, curr, pixels, k, n)
    p, iters, cost, used, converged, reason = _gauss_newton(problem, p0, p_start, cfg)
    return AlignResult(
        p=WarpParams.from_vector(p),
        iterations=iters,
        final_cost=cost if math.isfinite(cost) else 0.0,
        pixels_used=used,
        converged=converged,
        failure_reason=reason,
    )


def relative_camera_rotation(r_wi_prev: np.ndarray, r_wi_curr: np.ndarray, extr: Extrinsics) -> np.ndarray:
    """Rotation taking current-camera coordinates into previous-camera coordinates."""
    return extr.r_ci @ r_wi_prev.T @ r_wi_curr @ extr.r_ci.T


def prior_from_imu(
    ahrs_prev: AhrsAttitude,
    ahrs_curr: AhrsAttitude,
    prev_state: EkfState | None,
    dt: float,
    extr: Extrinsics,
    use_velocity: bool = True,
) -> AlignPrior:
    """Initial warp from the AHRS rotation increment and the last filtered velocity.

    The translation guess is ``v * dt / d`` from the previous filter state, or
    zero when there is none (or ``use_velocity`` is off).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rot = relative_camera_rotation(ahrs_prev.rotation, ahrs_curr.rotation, extr)
    r = matrix_to_rodrigues(rot)
    t = np.zeros(3)
    if use_velocity and prev_state is not None:
        t = prev_state.v * dt / prev_state.d
    return AlignPrior(WarpParams(t=tuple(t), r=tuple(r)))
