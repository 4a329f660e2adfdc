"""Procedural lung-like phantoms with a known smooth warp.

The fixed volume holds two unequal egg-shaped "lungs" filled with textured
parenchyma (about -850 HU) and branching trees of Gaussian-profile vessels,
inside an ellipsoidal body. The moving volume is the same anatomy seen
through a smooth warp ``phi`` (sine waves plus optional interior swirls):
``M(phi(x)) = F(x)`` with the parenchyma made 150 HU denser, so the true
fixed-to-moving transform is ``phi`` itself and landmark pairs are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .image import Image3D, smooth_gaussian, trilinear_sample

PARENCHYMA_HU = -850.0
TISSUE_HU = 40.0
AIR_HU = -1000.0
VESSEL_HU = 40.0


def _rotation(axis, angle):
    """Rodrigues rotation matrices, shape (n, 3, 3) for angles of shape (n,)."""
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    s, c = np.sin(angle)[:, None, None], np.cos(angle)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


@dataclass
class Swirl:
    """Rotation about ``axis`` through ``center`` by ``rate * exp(-|x - center|^2 / (2 radius^2))``.

    The angle only depends on the distance to the centre, which the rotation
    preserves, so the map is volume preserving and its inverse is the
    rotation by the opposite angle.
    """

    center: np.ndarray
    axis: np.ndarray
    radius: float
    rate: float

    def angle(self, x):
        d = x - self.center
        return self.rate * np.exp(-0.5 * np.sum(d * d, axis=1) / self.radius ** 2)

    def __call__(self, x, sign=1.0):
        d = x - self.center
        return self.center + np.einsum("nij,nj->ni", _rotation(self.axis, sign * self.angle(x)), d)

    def jacobian(self, x):
        d = x - self.center
        th = self.angle(x)
        Rd = np.einsum("nij,nj->ni", _rotation(self.axis, th), d)
        grad = -th[:, None] * d / self.radius ** 2
        return _rotation(self.axis, th) + np.einsum("ni,na->nia", np.cross(self.axis, Rd), grad)


@dataclass
class PhantomWarp:
    """``phi = W o S_k o ... o S_1``: interior swirls followed by a smooth wave field.

    ``W(x) = x + scale * sum_m b_m sin(k_m . (x - c) + phase_m)`` moves the
    lungs as a whole; the swirls ``S_v`` (:class:`Swirl`) turn the lung
    interior while barely moving its outline.
    """

    center: np.ndarray
    amplitudes: np.ndarray  # (m, 3)
    wavevectors: np.ndarray  # (m, 3), rad/mm
    phases: np.ndarray  # (m,)
    scale: float = 1.0
    swirls: tuple = ()

    def wave(self, x):
        arg = (x - self.center) @ self.wavevectors.T + self.phases
        return self.scale * np.sin(arg) @ self.amplitudes

    def wave_jacobian(self, x):
        c = np.cos((x - self.center) @ self.wavevectors.T + self.phases)
        return self.scale * np.einsum("nm,mi,ma->nia", c, self.amplitudes, self.wavevectors) + np.eye(3)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        for s in self.swirls:
            x = s(x)
        return x + self.wave(x)

    def displacement(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self(x) - x

    def jacobian(self, x):
        """Closed-form ``d phi_i / d x_a``, shape (n, 3, 3)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        J = np.broadcast_to(np.eye(3), (len(x), 3, 3))
        for s in self.swirls:
            J = s.jacobian(x) @ J
            x = s(x)
        return self.wave_jacobian(x) @ J

    def inverse(self, z, tol=1e-10, max_iter=100):
        """Solve ``phi(x) = z``: Newton on the wave part, then the swirls undone in reverse."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        x = z - self.wave(z)
        for _ in range(max_iter):
            r = x + self.wave(x) - z
            if np.abs(r).max() < tol:
                break
            x = x - np.linalg.solve(self.wave_jacobian(x), r[..., None])[..., 0]
        else:
            raise ValidationError("warp inverse did not converge; reduce the amplitude")
        for s in reversed(self.swirls):
            x = s(x, sign=-1.0)
        return x


@dataclass
class Phantom:
    fixed: Image3D
    moving: Image3D
    fixed_mask: Image3D
    moving_mask: Image3D
    field: Image3D
    landmarks_fixed: np.ndarray
    landmarks_moving: np.ndarray
    warp: PhantomWarp


def _ellipsoid(points, center, radii):
    q = (points - center) / radii
    return np.sum(q * q, axis=1) <= 1.0


def _lung_shape(q, side):
    """Star-shaped lung on normalised coordinates: <= 1 inside.

    The radius grows towards the base and shrinks on the medial side, so no
    affine map other than the identity takes the shape onto itself.
    """
    r = np.sqrt(np.sum(q * q, axis=-1))
    u = q / np.maximum(r, 1e-12)[..., None]
    rho = 1.0 - 0.18 * u[..., 2] - 0.25 * np.maximum(side * u[..., 0], 0.0) ** 2
    return r / rho


def _in_lungs(points, lungs, scale=1.0):
    inside = np.zeros(len(points), bool)
    for c, r, side in lungs:
        inside |= _lung_shape((points - c) / (r * scale), side) <= 1.0
    return inside


def _lungs(center, extent):
    """Right and left lung as (center, semi-axes, medial side) triples; deliberately asymmetric."""
    e = np.asarray(extent, dtype=float)
    # the right lung is wider and shorter and sits higher; differing axis
    # ratios and offsets keep the pair free of affine self-symmetries
    right = (center + np.array([-0.20, 0.03, 0.05]) * e, np.array([0.16, 0.25, 0.29]) * e, 1.0)
    left = (center + np.array([0.21, -0.02, -0.02]) * e, np.array([0.14, 0.19, 0.35]) * e, -1.0)
    return [right, left]


def _vessel_segments(rng, center, radii, n_roots=5, depth=6, reach=0.6, min_radius=1.4):
    segs = []
    for _ in range(n_roots):
        start = center + rng.uniform(-0.25, 0.25, 3) * radii
        d = rng.normal(size=3)
        stack = [(start, d / np.linalg.norm(d), 3.0, 0.42 * radii.min(), 0)]
        while stack:
            p, d, r, length, lvl = stack.pop()
            end = p + d * length
            q = (end - center) / radii
            if np.sum(q * q) > reach:
                end = center + (end - center) * np.sqrt(reach / np.sum(q * q))
            segs.append((p, end, r))
            if lvl + 1 >= depth:
                continue
            for _ in range(2):
                nd = d + rng.normal(scale=0.8, size=3)
                stack.append((end, nd / np.linalg.norm(nd), max(min_radius, r * 0.8), length * 0.72, lvl + 1))
    return segs


def _lung_membership(points, lungs, width=1.5):
    """Soft lung indicator, falling from 1 to 0 over about ``width`` mm at the outline."""
    m = np.zeros(len(points))
    for c, r, side in lungs:
        s = _lung_shape((points - c) / r, side)
        m = np.maximum(m, 0.5 * (1.0 - np.tanh((s - 1.0) * float(np.mean(r)) / width)))
    return m


def _anatomy_volume(rng, lungs, spacing=1.0, texture_sigma=4.0, texture_hu=40.0):
    """Tissue, parenchyma texture and vessels on a 1 mm reference grid covering the lungs.

    Returns the intensities and the soft lung membership on that grid. The
    smooth outline keeps the images free of aliased steps at 2 mm sampling.
    """
    lo = np.min([c - 1.3 * r for c, r, _ in lungs], axis=0) - 4.0
    hi = np.max([c + 1.3 * r for c, r, _ in lungs], axis=0) + 4.0
    dims = tuple(int(v) for v in np.ceil((hi - lo) / spacing) + 1)
    noise = Image3D(rng.normal(size=dims), (spacing,) * 3, tuple(lo))
    tex = smooth_gaussian(noise, texture_sigma).values
    tex *= texture_hu / tex.std()
    vessel = np.zeros(dims)
    axes = [lo[a] + spacing * np.arange(dims[a]) for a in range(3)]
    segments = [s for c, r, _ in lungs for s in _vessel_segments(rng, c, r)]
    for a, b, r in segments:
        bmin = np.minimum(a, b) - 3 * r
        bmax = np.maximum(a, b) + 3 * r
        sl = []
        for ax in range(3):
            i0 = max(0, int(np.floor((bmin[ax] - lo[ax]) / spacing)))
            i1 = min(dims[ax], int(np.ceil((bmax[ax] - lo[ax]) / spacing)) + 1)
            sl.append(slice(i0, i1))
        if any(s.stop <= s.start for s in sl):
            continue
        g = np.stack(np.meshgrid(axes[0][sl[0]], axes[1][sl[1]], axes[2][sl[2]], indexing="ij"), -1)
        ab = b - a
        t = np.clip(((g - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        dist2 = np.sum((g - (a + t[..., None] * ab)) ** 2, axis=-1)
        prof = np.exp(-0.5 * dist2 / (r * r))
        vessel[tuple(sl)] = np.maximum(vessel[tuple(sl)], prof)
    lung = PARENCHYMA_HU + tex + (VESSEL_HU - PARENCHYMA_HU) * vessel
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    member = _lung_membership(grid, lungs).reshape(dims)
    values = TISSUE_HU + member * (lung - TISSUE_HU)
    return Image3D(values, (spacing,) * 3, tuple(lo)), Image3D(member, (spacing,) * 3, tuple(lo))


def _render(points, anatomy, lungs, center, body_radii, hu_shift):
    values, member = anatomy
    lung = _in_lungs(points, lungs)
    body = _ellipsoid(points, center, body_radii)
    vals = np.where(body, TISSUE_HU, AIR_HU)
    near = _in_lungs(points, lungs, 1.25)
    vals[near] = trilinear_sample(values, points[near]) + hu_shift * trilinear_sample(member, points[near])
    return vals, lung


def _fit_scale(peak, target, hi=1.0):
    """Bisection for the factor ``t`` with ``peak(t) = target`` (``peak`` increasing)."""
    lo = 0.0
    while peak(hi) < target:
        hi *= 2.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if peak(mid) < target else (lo, mid)
    return 0.5 * (lo + hi)


def make_warp(rng, center, extent, amplitude, lungs=(), twist=0.0):
    """Smooth random warp whose largest displacement over the lung box equals ``amplitude``.

    ``twist`` in [0, 1) is the share of the peak displacement produced by a
    swirl inside each lung (motion the lung outline does not reveal).
    """
    L = float(np.max(extent))
    base = np.array([
        # (amplitude vector, wave vector in units of pi / L)
        [0.0, 0.0, 1.0, 0.0, 0.0, 0.9],
        [1.0, 0.0, 0.0, 0.0, 0.8, 0.0],
        [0.0, 1.0, 0.0, 0.8, 0.0, 0.0],
        [0.7, 0.0, 0.0, 0.0, 0.0, 0.8],
        [0.0, 0.7, 0.0, 0.0, 0.0, -0.8],
        [0.0, 0.0, 0.5, 0.9, 0.9, 0.0],
    ])
    amps = base[:, :3] * rng.uniform(0.7, 1.0, (len(base), 1))
    waves = base[:, 3:] * np.pi / L
    phases = rng.uniform(0, 2 * np.pi, len(base))
    center = np.asarray(center, dtype=float)
    probe = center + (rng.uniform(-0.5, 0.5, (4000, 3)) * extent)
    warp = PhantomWarp(center, amps, waves, phases, 0.0)

    def peak(w):
        return np.linalg.norm(w.displacement(probe), axis=1).max()

    if amplitude <= 0:
        return warp
    if twist > 0 and len(lungs):
        swirls = []
        for c, r, _ in lungs:
            a = np.array([0.0, 0.0, 1.0]) + rng.normal(scale=0.2, size=3)
            swirls.append(Swirl(c + rng.uniform(-0.1, 0.1, 3) * r, a / np.linalg.norm(a),
                                0.6 * float(np.sqrt(r[0] * r[1])), rng.choice([-1.0, 1.0])))
        signs = [s.rate for s in swirls]

        def swirl_peak(t):
            warp.swirls = tuple(Swirl(s.center, s.axis, s.radius, g * t) for s, g in zip(swirls, signs))
            return peak(warp)

        swirl_peak(min(_fit_scale(swirl_peak, twist * amplitude), 0.5 * np.pi))

    def total_peak(t):
        warp.scale = t
        return peak(warp)

    total_peak(_fit_scale(total_peak, amplitude))
    return warp


def make_phantom(seed=0, size=64, spacing=2.0, warp_amplitude_mm=10.0, n_landmarks=200,
                 hu_shift=150.0, twist=0.0, jacobian_range=(0.4, 2.5), noise_hu=0.0, texture_hu=40.0):
    """Fixed/moving phantom pair with masks, ground-truth field and landmarks.

    Parameters
    ----------
    seed : int
    size : int or 3-tuple
        Voxels per axis.
    spacing : float or 3-tuple
        Voxel size in mm.
    warp_amplitude_mm : float
        Largest displacement of the warp over the lung box.
    n_landmarks : int
        Landmark pairs sampled inside the fixed lung (moving = phi(fixed)).
    hu_shift : float
        Density increase of the moving parenchyma.
    twist : float
        Share of the peak displacement due to swirls inside the lungs.
    jacobian_range : 2-tuple
        Allowed det(grad phi) over the lungs; warps outside it are rejected.
    noise_hu : float
        Standard deviation of independent Gaussian acquisition noise added to
        each image. It uses its own random stream, so the anatomy, warp and
        landmarks do not depend on it.
    texture_hu : float
        Amplitude of the smooth parenchyma texture. Small values leave the
        vessels as the main structure, as in real lung CT.

    Returns
    -------
    Phantom
    """
    rng = np.random.default_rng(seed)
    dims = np.broadcast_to(np.asarray(size, dtype=int), (3,))
    sp = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    extent = dims * sp
    center = (dims - 1) * sp / 2
    lungs = _lungs(center, extent)
    body_radii = np.array([0.46, 0.42, 0.48]) * extent
    anatomy = _anatomy_volume(rng, lungs, texture_hu=texture_hu)
    box = np.max([c + r for c, r, _ in lungs], axis=0) - np.min([c - r for c, r, _ in lungs], axis=0)
    warp = make_warp(rng, center, box, warp_amplitude_mm, lungs, twist)

    grid = Image3D(np.zeros(tuple(dims)), tuple(sp), (0.0, 0.0, 0.0))
    pts = grid.voxel_centers()
    J = warp.jacobian(pts[_in_lungs(pts, lungs, 1.1)])
    det = np.linalg.det(J)
    if det.min() < jacobian_range[0] or det.max() > jacobian_range[1]:
        raise ValidationError(f"warp Jacobian range [{det.min():.3f}, {det.max():.3f}] outside {jacobian_range}")

    f_vals, f_lung = _render(pts, anatomy, lungs, center, body_radii, 0.0)
    src = warp.inverse(pts)
    m_vals, m_lung = _render(src, anatomy, lungs, center, body_radii, hu_shift)
    shape = tuple(dims)
    if noise_hu > 0:
        noise = np.random.default_rng([seed, 1])
        f_vals = f_vals + noise.normal(scale=noise_hu, size=f_vals.shape)
        m_vals = m_vals + noise.normal(scale=noise_hu, size=m_vals.shape)
    fixed = grid.with_values(f_vals.reshape(shape))
    moving = grid.with_values(m_vals.reshape(shape))
    fixed_mask = grid.with_values(f_lung.reshape(shape).astype(np.uint8))
    moving_mask = grid.with_values(m_lung.reshape(shape).astype(np.uint8))
    field = Image3D(warp.displacement(pts).reshape(shape + (3,)), grid.spacing, grid.origin)

    # landmarks well inside the lung so every method sees them in its mask
    lo = np.min([c - 1.3 * r for c, r, _ in lungs], axis=0)
    hi = np.max([c + 1.3 * r for c, r, _ in lungs], axis=0)
    cand = rng.uniform(lo, hi, (40 * n_landmarks + 100, 3))
    cand = cand[_in_lungs(cand, lungs, 0.85)][:n_landmarks]
    return Phantom(fixed, moving, fixed_mask, moving_mask, field, cand, warp(cand), warp)
