"""Sparse regularised keypoint correspondences.

Pipeline: Förstner keypoints in the fixed image, NGF patch costs over a
dense lattice of candidate displacements, a minimum-spanning-tree part-based
model solved exactly by two-pass min-sum belief propagation (messages via
quadratic distance transforms), and a symmetric refinement that averages
forward and backward marginal energies.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from ._kernels import ngf_cost_volume
from .image import gradient, min_convolve_axis, smooth_gaussian, trilinear_sample
from .objective import normalized_gradient

log = logging.getLogger(__name__)

ALPHA_KP = 1.0 / 45.0
SIGMA_I = 150.0


@dataclass(frozen=True)
class DisplacementLattice:
    """Quantised candidate displacements ``{0, +-step, ..., +-radius}^3`` (mm).

    ``radius`` may be a 3-tuple to build non-cubic lattices.
    """

    step: float = 2.0
    radius: float | tuple = 32.0

    @property
    def half_counts(self):
        r = np.broadcast_to(np.asarray(self.radius, dtype=float), (3,))
        n = np.rint(r / self.step).astype(int)
        if np.any(np.abs(n * self.step - r) > 1e-9):
            raise ValueError("radius must be a multiple of the lattice step")
        return n

    @property
    def shape(self):
        return tuple(int(v) for v in 2 * self.half_counts + 1)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def labels(self):
        """Displacement vectors (mm) in C order over :attr:`shape`, shape (L, 3)."""
        h = self.half_counts
        axes = [np.arange(-h[a], h[a] + 1) * self.step for a in range(3)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def index_of(self, d):
        """Flat label index of displacement ``d`` (mm)."""
        i = np.rint(np.asarray(d, dtype=float) / self.step).astype(int) + self.half_counts
        if np.any(i < 0) or np.any(i >= np.asarray(self.shape)):
            raise ValueError(f"displacement {d} not on the lattice")
        return int(np.ravel_multi_index(tuple(i), self.shape))

    def negated(self, values):
        """Re-index label-last arrays so entry ``l`` refers to ``-labels[l]``."""
        return np.asarray(values)[..., ::-1]


@dataclass
class KeypointSet:
    points: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.points)


@dataclass
class SpanningTree:
    """Rooted tree. ``parent[root] == -1``; ``edge_weight[k]`` belongs to edge (k, parent[k])."""

    root: int
    parent: np.ndarray
    children: list
    edge_weight: np.ndarray
    order: np.ndarray

    @property
    def n_nodes(self):
        return len(self.parent)

    def edges(self):
        return [(int(k), int(p)) for k, p in enumerate(self.parent) if p >= 0]

    @property
    def total_weight(self):
        return float(sum(self.edge_weight[k] for k, _ in self.edges()))


@dataclass
class CorrespondenceSet:
    """Sparse correspondences: fixed-frame ``sources`` to moving-frame ``targets`` (mm)."""

    sources: np.ndarray
    targets: np.ndarray
    displacements: np.ndarray | None = None
    energies: np.ndarray | None = None
    marginals: np.ndarray | None = None

    def __len__(self):
        return len(self.sources)


# -- keypoint detection -------------------------------------------------------

def foerstner_response(F, sigma_mm=1.4, eps=1e-12):
    """Distinctiveness ``1 / trace(T^-1)`` of the smoothed structure tensor ``T``."""
    g = gradient(F).values
    idx = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
    T = {}
    for i, j in idx:
        T[i, j] = smooth_gaussian(F.with_values(g[..., i] * g[..., j]), sigma_mm).values
    a, b, c = T[0, 0] + eps, T[1, 1] + eps, T[2, 2] + eps
    d, e, f = T[0, 1], T[0, 2], T[1, 2]
    det = a * (b * c - f * f) - d * (d * c - f * e) + e * (d * f - b * e)
    minors = (b * c - f * f) + (a * c - e * e) + (a * b - d * d)
    with np.errstate(divide="ignore", invalid="ignore"):
        fd = np.where(minors > 0, det / minors, 0.0)
    return F.with_values(np.maximum(fd, 0.0))


def detect_keypoints(F, mask, sigma_mm=1.4, radius=3, min_score=1e-8, max_keypoints=None):
    """Förstner keypoints restricted to ``mask`` with cubic non-maximum suppression.

    A voxel survives if its response equals the maximum over the cube of
    half-width ``radius`` voxels around it. Ties inside one cube are broken
    greedily by score so that survivors are at least ``radius + 1`` voxels
    apart in the Chebyshev sense.
    """
    fd = foerstner_response(F, sigma_mm).values
    peak = ndimage.maximum_filter(fd, size=2 * radius + 1, mode="constant", cval=0.0)
    floor = max(min_score, 1e-6 * float(fd.max()))
    keep = (fd == peak) & (fd > floor) & (np.asarray(mask.values) != 0)
    idx = np.argwhere(keep)
    scores = fd[keep]
    order = np.lexsort((np.arange(len(scores)), -scores))
    idx, scores = idx[order], scores[order]
    if len(idx):
        tree = cKDTree(idx)
        alive = np.ones(len(idx), bool)
        for n in range(len(idx)):
            if not alive[n]:
                continue
            for m in tree.query_ball_point(idx[n], r=radius, p=np.inf):
                if m > n:
                    alive[m] = False
        idx, scores = idx[alive], scores[alive]
    if max_keypoints is not None and len(idx) > max_keypoints:
        idx, scores = idx[:max_keypoints], scores[:max_keypoints]
    # back to raster order for stable downstream indexing
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0])) if len(idx) else np.arange(0)
    idx, scores = idx[order], scores[order]
    return KeypointSet(F.index_to_world(idx).reshape(-1, 3), scores)


# -- matching costs ------------------------------------------------------------

def patch_offsets(size=7, stride=2):
    half = (size - 1) / 2
    ax = np.arange(-half, half + 1e-9, stride)
    grid = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.rint(np.stack([g.ravel() for g in grid], axis=1)).astype(np.int64)


def _lattice_voxels(lattice, spacing):
    sp = np.asarray(spacing, dtype=float)
    v = lattice.labels / sp
    if not np.allclose(v, np.rint(v)):
        raise ValueError("lattice step must be a multiple of the voxel spacing")
    return np.rint(v).astype(np.int64)


def build_cost_volume(F, M_hat, points, lattice, eta, patch_size=7, stride=2, dtype=np.float32):
    """Mean NGF residual over a strided patch for every point and displacement.

    ``F`` and ``M_hat`` must share one grid (typically 1 mm isotropic). Patch
    samples leaving either volume cost 1. Returns an array of shape (K, L).
    """
    if not F.same_grid(M_hat):
        raise ValueError("fixed and pre-aligned moving image must share a grid")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    centers = np.rint(F.world_to_index(pts)).astype(np.int64)
    nf = np.ascontiguousarray(normalized_gradient(gradient(F).values, eta))
    nm = np.ascontiguousarray(normalized_gradient(gradient(M_hat).values, eta))
    out = np.empty((len(pts), lattice.size), dtype=np.float64)
    if len(pts):
        ngf_cost_volume(nf, nm, centers, patch_offsets(patch_size, stride),
                        _lattice_voxels(lattice, F.spacing), out)
    return out.astype(dtype, copy=False)


# -- tree construction -----------------------------------------------------------

def _orient(n, edges, weights, root):
    adj = [[] for _ in range(n)]
    for (a, b), w in zip(edges, weights):
        adj[a].append((b, w))
        adj[b].append((a, w))
    parent = np.full(n, -1, dtype=np.int64)
    edge_weight = np.zeros(n)
    children = [[] for _ in range(n)]
    order = [root]
    seen = np.zeros(n, bool)
    seen[root] = True
    head = 0
    while head < len(order):
        k = order[head]
        head += 1
        for q, w in sorted(adj[k]):
            if not seen[q]:
                seen[q] = True
                parent[q] = k
                edge_weight[q] = w
                children[k].append(q)
                order.append(q)
    return SpanningTree(root, parent, children, edge_weight, np.asarray(order, dtype=np.int64))


def tree_from_edges(n, edges, weights=None, root=0):
    """Root an explicit edge list (used for hand-built trees and tests)."""
    weights = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=float)
    tree = _orient(n, edges, weights, root)
    if len(tree.order) != n:
        raise ValueError("edge list does not span a connected tree")
    return tree


def build_mst(points, intensities, k=10, sigma_i=SIGMA_I):
    """Minimum spanning tree over a k-nearest-neighbour graph.

    Edge cost ``||x_k - x_q|| + |F(k) - F(q)| / sigma_i``. Disconnected kNN
    components are joined through their closest cross pair; the root is the
    node nearest the centroid.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = np.asarray(intensities, dtype=float)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot build a tree without keypoints")
    root = int(np.argmin(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    if n == 1:
        return SpanningTree(0, np.array([-1]), [[]], np.zeros(1), np.array([0]))

    def cost(a, b):
        return np.linalg.norm(pts[a] - pts[b], axis=-1) + np.abs(vals[a] - vals[b]) / sigma_i

    kk = min(k, n - 1)
    _, nbr = cKDTree(pts).query(pts, kk + 1)
    rows = np.repeat(np.arange(n), kk)
    cols = nbr[:, 1:].ravel()
    a, b = np.minimum(rows, cols), np.maximum(rows, cols)
    pairs = np.unique(np.stack([a, b], axis=1), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    w = cost(pairs[:, 0], pairs[:, 1])

    ncomp, label = connected_components(coo_matrix((w, (pairs[:, 0], pairs[:, 1])), shape=(n, n)),
                                        directed=False)
    extra = []
    while ncomp > 1:
        # join component 0 to its nearest other component
        inside = np.flatnonzero(label == 0)
        outside = np.flatnonzero(label != 0)
        d, j = cKDTree(pts[outside]).query(pts[inside])
        i = int(np.argmin(d))
        extra.append((inside[i], outside[j[i]]))
        label[label == label[outside[j[i]]]] = 0
        ncomp = len(np.unique(label))
    if extra:
        e = np.asarray(extra)
        pairs = np.concatenate([pairs, np.sort(e, axis=1)])
        w = np.concatenate([w, cost(e[:, 0], e[:, 1])])

    # zero weights would be dropped by the sparse MST; they cannot occur for distinct points
    mst = minimum_spanning_tree(coo_matrix((w, (pairs[:, 0], pairs[:, 1])), shape=(n, n))).tocoo()
    edges = list(zip(mst.row.tolist(), mst.col.tolist()))
    return _orient(n, edges, mst.data, root)


# -- inference -------------------------------------------------------------------

def quadratic_distance_transform(costs, weight, step=1.0):
    """Min-convolution ``g(d) = min_d' f(d') + weight ||d - d'||^2`` on a 3D label grid.

    ``costs`` has the label-grid shape; distances are in mm with lattice
    spacing ``step``. Returns the convolved costs and, per output label, the
    flat index of the minimising input label.
    """
    f = np.asarray(costs, dtype=float)
    if f.ndim == 1:
        f = f.reshape(-1, 1, 1)
    steps = np.broadcast_to(np.asarray(step, dtype=float), (3,))
    g0, a0 = min_convolve_axis(f, weight * steps[0] ** 2, 0)
    g1, a1 = min_convolve_axis(g0, weight * steps[1] ** 2, 1)
    g2, a2 = min_convolve_axis(g1, weight * steps[2] ** 2, 2)
    i, j, _ = np.indices(f.shape)
    k_star = a2
    j_star = a1[i, j, k_star]
    i_star = a0[i, j_star, k_star]
    arg = np.ravel_multi_index((i_star, j_star, k_star), f.shape)
    return g2.reshape(np.shape(costs)), arg.reshape(np.shape(costs))


def _message(h, weight, lattice):
    g, _ = quadratic_distance_transform(h.reshape(lattice.shape), weight, lattice.step)
    return g.ravel()


def tree_bp_marginals(costs, tree, alpha_kp, lattice):
    """Exact min-marginals of the tree model by two-pass min-sum belief propagation.

    Energy: ``sum_k costs[k, d_k] + sum_edges alpha_kp ||d_k - d_q||^2 / w_kq``.
    Messages are computed in float64 and stored in the dtype of ``costs``.
    """
    costs = np.asarray(costs)
    K, L = costs.shape
    if L != lattice.size:
        raise ValueError("cost volume does not match the lattice")
    if tree.n_nodes != K:
        raise ValueError("tree and cost volume disagree on the number of keypoints")
    acc = np.array(costs, dtype=costs.dtype if costs.dtype.kind == "f" else float, copy=True)
    up = np.zeros_like(acc)
    pw = np.zeros(K)
    nz = tree.edge_weight > 0
    pw[nz] = alpha_kp / tree.edge_weight[nz]
    # leaves to root
    for node in tree.order[::-1]:
        p = tree.parent[node]
        if p < 0:
            continue
        m = _message(acc[node].astype(float), pw[node], lattice)
        up[node] = m
        acc[p] += m.astype(acc.dtype, copy=False)
    # root to leaves: acc[node] becomes the marginal once its parent is final
    for node in tree.order:
        p = tree.parent[node]
        if p < 0:
            continue
        m = _message(acc[p].astype(float) - up[node], pw[node], lattice)
        acc[node] += m.astype(acc.dtype, copy=False)
    return acc


def combine_marginals(forward, backward, lattice=None):
    """Average forward energies with sign-reversed backward energies per keypoint."""
    return 0.5 * (np.asarray(forward, dtype=float) + np.asarray(backward, dtype=float)[..., ::-1])


def _intensities(img, pts):
    return trilinear_sample(img, pts) if len(pts) else np.zeros(0)


def regularized_marginals(F, M_hat, points, lattice, eta, alpha_kp=ALPHA_KP, k=10,
                          sigma_i=SIGMA_I, patch_size=7, stride=2):
    """Cost volume, MST and tree BP for one matching direction."""
    costs = build_cost_volume(F, M_hat, points, lattice, eta, patch_size, stride)
    tree = build_mst(points, _intensities(F, points), k, sigma_i)
    marg = tree_bp_marginals(costs, tree, alpha_kp, lattice)
    return marg, tree


def symmetric_refine(points, forward, F, M_hat, lattice, alpha_kp=ALPHA_KP, eta=12.0,
                     prereg=None, k=10, sigma_i=SIGMA_I, patch_size=7, stride=2, keep_marginals=False):
    """Backward matching from the forward matches and averaged-marginal selection.

    Keypoints are moved by their forward arg-min into ``M_hat`` and matched
    back to ``F`` with the same procedure; the backward marginal of label
    ``-d`` is averaged with the forward marginal of ``d``. Targets are mapped
    through ``prereg`` into the original moving frame.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    labels = lattice.labels
    d_fwd = labels[np.argmin(forward, axis=1)]
    z = pts + d_fwd
    backward, _ = regularized_marginals(M_hat, F, z, lattice, eta, alpha_kp, k, sigma_i, patch_size, stride)
    avg = combine_marginals(forward, backward)
    best = np.argmin(avg, axis=1)
    d_star = labels[best]
    energies = avg[np.arange(len(pts)), best]
    matched = pts + d_star
    targets = prereg.evaluate(matched) if prereg is not None else matched
    return CorrespondenceSet(pts, targets, d_star, energies, avg.astype(np.float32) if keep_marginals else None)


def match_keypoints(F, M_hat, mask, lattice=None, eta=12.0, alpha_kp=ALPHA_KP, prereg=None,
                    sigma_mm=1.4, radius=3, max_keypoints=None, k=10, sigma_i=SIGMA_I,
                    symmetric=True):
    """Full sparse stage on a shared (1 mm) grid: detect, match, regularise, refine."""
    lattice = lattice or DisplacementLattice()
    keys = detect_keypoints(F, mask, sigma_mm, radius, max_keypoints=max_keypoints)
    log.info("detected %d keypoints", len(keys))
    if len(keys) == 0:
        return keys, CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    forward, _ = regularized_marginals(F, M_hat, keys.points, lattice, eta, alpha_kp, k, sigma_i)
    if symmetric:
        corr = symmetric_refine(keys.points, forward, F, M_hat, lattice, alpha_kp, eta, prereg, k, sigma_i)
    else:
        best = np.argmin(forward, axis=1)
        d = lattice.labels[best]
        matched = keys.points + d
        targets = prereg.evaluate(matched) if prereg is not None else matched
        corr = CorrespondenceSet(keys.points, targets, d, forward[np.arange(len(best)), best])
    return keys, corr


def write_correspondences_csv(corr, path):
    """Debug dump: ``x,y,z,dx,dy,dz,energy`` per keypoint (mm), displacement to the target."""
    disp = corr.targets - corr.sources
    energy = corr.energies if corr.energies is not None else np.zeros(len(corr))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "dx", "dy", "dz", "energy"])
        for s, d, e in zip(corr.sources, disp, energy):
            w.writerow([f"{v:.6f}" for v in (*s, *d, e)])


def read_correspondences_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return CorrespondenceSet(data[:, :3], data[:, :3] + data[:, 3:6], None, data[:, 6])
