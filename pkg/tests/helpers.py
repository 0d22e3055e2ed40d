"""Rendering and finite-difference helpers shared by the unit tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from downvio.fusion import Extrinsics, FusionMeasurement, propagate_mean
from downvio.geometry import PlaneNormal, WarpParams, normal_vector_from_attitude, rodrigues_to_matrix
from downvio.simsynth import Renderer
from downvio.simsynth.synth import CameraPose, camera_plane_normal, camera_pose, plane_distance, sample_times

NADIR_CAMERA = np.diag([1.0, -1.0, -1.0])  # camera -> world for a level nadir camera


def render_pair(renderer: Renderer, t_star, r_star, height=2.0, base_rot=NADIR_CAMERA, origin=(0.0, 0.0)):
    """Float renders of a previous/current frame pair related by a known warp.

    The current camera is placed so that its motion relative to the previous
    one gives exactly ``(t_star, r_star)`` with the current-frame plane
    distance as the scale. Returns ``(prev, curr, WarpParams, PlaneNormal)``.
    """
    r_wc1 = np.asarray(base_rot, dtype=float)
    p1 = np.array([origin[0], origin[1], height])
    t = np.asarray(t_star, dtype=float)
    r_wc2 = r_wc1 @ rodrigues_to_matrix(r_star)
    step = r_wc1 @ t
    d2 = p1[2] / (1.0 - step[2])
    p2 = p1 + step * d2
    prev = renderer.render(CameraPose(p1, r_wc1))
    curr = renderer.render(CameraPose(p2, r_wc2))
    n = PlaneNormal.from_vector(r_wc2.T @ np.array([0.0, 0.0, -1.0]))
    return prev, curr, WarpParams(t=tuple(t), r=tuple(r_star)), n


def random_warp(rng: np.random.Generator, t_max=0.05, r_max=0.02):
    """Uniform random directions with norms uniform in ``[0, t_max]`` and ``[0, r_max]``."""
    t = rng.normal(size=3)
    r = rng.normal(size=3)
    t *= rng.uniform(0, t_max) / np.linalg.norm(t)
    r *= rng.uniform(0, r_max) / np.linalg.norm(r)
    return t, r


def photometric_jacobian_error(problem, pixels, k, n_vec, q, step=1e-5):
    """Worst per-column relative error between the analytic Jacobian and central differences.

    The residual is built on a bilinear interpolant, which is not
    differentiable on pixel grid lines. Pixels whose finite-difference stencil
    crosses a grid line in any parameter direction are excluded; the returned
    count says how many pixels took part.
    """
    from downvio.geometry import homography_matrix, warp_points

    res, jac, kept = problem.evaluate(q)
    xs, ys = pixels.xs, pixels.ys
    valid = kept.copy()
    diffs = []
    for i in range(6):
        e = np.zeros(6)
        e[i] = step
        cells = []
        for sign in (1, -1):
            wx, wy = warp_points(homography_matrix(k, q + sign * e, n_vec), xs, ys)
            cells.append((np.floor(wx), np.floor(wy)))
        valid &= (cells[0][0] == cells[1][0]) & (cells[0][1] == cells[1][1])
        rp, _, kp = problem.evaluate(q + e, with_jacobian=False)
        rm, _, km = problem.evaluate(q - e, with_jacobian=False)
        valid &= kp & km
        full_p = np.full(kept.size, np.nan)
        full_m = np.full(kept.size, np.nan)
        full_p[kp] = rp
        full_m[km] = rm
        diffs.append((full_p - full_m) / (2 * step))
    full_jac = np.full((kept.size, 6), np.nan)
    full_jac[kept] = jac
    errs = []
    for i in range(6):
        fd = diffs[i][valid]
        an = full_jac[valid, i]
        errs.append(np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-300))
    return max(errs), int(valid.sum())


def exact_measurements(spec, trajectory=None, duration=None):
    """Noise-free ``[v/d; d]`` measurements at every image time after the first.

    ``t_m`` is the true camera velocity over the true plane distance times the
    frame gap, and the range is the true slant distance along the optical axis.
    """
    traj = trajectory or spec.build_trajectory()
    tau = 1.0 / spec.image_rate
    out = []
    for t in sample_times(duration or spec.duration, spec.image_rate)[1:]:
        st = traj.state(float(t))
        pose = camera_pose(spec, st)
        d = plane_distance(spec, pose)
        n = camera_plane_normal(spec, pose)
        v_c = pose.rotation.T @ st.velocity
        out.append(FusionMeasurement(t_m=v_c / d * tau, l_m=d / n[2], n_z=n[2], tau=tau, timestamp=float(t)))
    return out


def random_config(rng):
    """A random state, IMU sample, attitude, normal, mounting and step."""
    x = np.concatenate([rng.normal(0, 1.0, 3), [rng.uniform(0.3, 5.0)], rng.normal(0, 0.3, 3)])
    attitude = rodrigues_to_matrix(rng.normal(0, 0.3, 3))
    g_i = attitude.T @ np.array([0.0, 0.0, -9.81])
    f_m = -g_i + rng.normal(0, 3.0, 3)
    omega = rng.normal(0, 1.0, 3)
    extr = Extrinsics(r_ci=rodrigues_to_matrix(rng.normal(0, 1.0, 3)), p_ic=rng.normal(0, 0.1, 3))
    n = normal_vector_from_attitude(attitude, extr.r_ci)
    tau = rng.uniform(0.001, 0.05)
    return x, f_m, omega, g_i, n, extr, tau


def fd_transition(x, f_m, omega, g_i, n, extr, tau, step=1e-6):
    """Central differences of the mean propagation w.r.t. the state and ``[f_m; omega_m]``."""

    def prop(xx, ff, ww):
        return propagate_mean(xx, ff, ww, g_i, n, extr, tau)

    g = np.zeros((7, 7))
    for j in range(7):
        e = np.zeros(7)
        e[j] = step
        g[:, j] = (prop(x + e, f_m, omega) - prop(x - e, f_m, omega)) / (2 * step)
    v = np.zeros((7, 6))
    for j in range(6):
        e = np.zeros(6)
        e[j] = step
        v[:, j] = (prop(x, f_m + e[:3], omega + e[3:]) - prop(x, f_m - e[:3], omega - e[3:])) / (2 * step)
    return g, v


def column_rel_error(analytic, numeric):
    scale = np.maximum(np.linalg.norm(numeric, axis=0), 1e-12)
    return float((np.linalg.norm(analytic - numeric, axis=0) / scale).max())
