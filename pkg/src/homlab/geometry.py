"""Domain, boundary split, patch layouts, and the structured mesh.

The computational domain is an axis-aligned box in R^n (n >= 3).  Its
boundary splits into the flat free face ``Sigma = {x_n = 0}`` and the
Dirichlet part ``Gamma`` (all remaining faces, or only the top face when the
lateral faces are identified periodically).  Constraint patches live on
Sigma: metric balls of radius ``r_k = tilde_r_k * eps**((n-1)/(n-2))``
centered on a lattice of spacing ``2*eps``.  That exponent is the critical
one: the aggregate capacity of the patches stays finite and nonzero as
``eps -> 0``, which is the regime the whole laboratory probes.

All types are immutable after construction; membership queries are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError, NodeBudgetError, ResolutionError

# node tags
INTERIOR = 0
GAMMA = 1
SIGMA_FREE = 2
SIGMA_PATCH = 3


def critical_exponent(n: int) -> float:
    """Radius scaling exponent (n-1)/(n-2) for dimension n."""
    return (n - 1.0) / (n - 2.0)


def _as_unit_lower_cholesky(a_matrix, n):
    """Cholesky factor of the metric matrix A, identity when A is None."""
    if a_matrix is None:
        return np.eye(n)
    a = np.asarray(a_matrix, dtype=float)
    if a.shape != (n, n):
        raise GeometryError(f"metric matrix must be {n}x{n}, got {a.shape}")
    return np.linalg.cholesky(a)


@dataclass(frozen=True)
class DomainSpec:
    """Axis-aligned box with the flat bottom face as the free boundary.

    Parameters
    ----------
    dim : spatial dimension, at least 3.
    extents : box edge lengths, defaults to the unit box.
    lateral_periodic : identify opposite lateral faces; Gamma is then only
        the top face.  This mode exists to enable quasi one-dimensional
        reference solutions and is not part of the continuum setting.
    """

    dim: int = 3
    extents: tuple = ()
    lateral_periodic: bool = False

    def __post_init__(self):
        if self.dim < 3:
            raise GeometryError(f"dimension must be >= 3, got {self.dim}")
        ext = tuple(float(e) for e in (self.extents or (1.0,) * self.dim))
        if len(ext) != self.dim:
            raise GeometryError(
                f"expected {self.dim} extents, got {len(ext)}")
        if any(e <= 0 for e in ext):
            raise GeometryError(f"extents must be positive, got {ext}")
        object.__setattr__(self, "extents", ext)

    @property
    def sigma_extents(self) -> tuple:
        """Edge lengths of the free bottom face."""
        return self.extents[:-1]

    @property
    def sigma_area(self) -> float:
        return float(np.prod(self.sigma_extents))

    def contains(self, x) -> np.ndarray:
        """Vectorized membership in the closed box."""
        x = np.asarray(x, dtype=float)
        ext = np.asarray(self.extents)
        return np.all((x >= 0.0) & (x <= ext), axis=-1)


@dataclass(frozen=True)
class PatchLayout:
    """Constraint-patch centers and radii for one value of eps.

    Invariants enforced at construction: pairwise center distance >= 2*eps,
    tilde_r within [c1, c2], and every radius strictly below eps.
    """

    domain: DomainSpec
    epsilon: float
    centers: np.ndarray
    tilde_r: np.ndarray
    c1: float = 0.1
    c2: float = 10.0
    nested: bool = False
    radii: np.ndarray = field(init=False)

    def __post_init__(self):
        eps = float(self.epsilon)
        if eps <= 0:
            raise GeometryError(f"epsilon must be positive, got {eps}")
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        tilde = np.broadcast_to(
            np.asarray(self.tilde_r, dtype=float), (centers.shape[0],)).copy()
        if centers.shape[1] != self.domain.dim:
            raise GeometryError("center dimension does not match the domain")
        if np.any(np.abs(centers[:, -1]) > 0):
            raise GeometryError("patch centers must lie on the bottom face")
        if np.any(tilde < self.c1) or np.any(tilde > self.c2):
            raise GeometryError(
                f"tilde_r must lie in [{self.c1}, {self.c2}]")
        radii = tilde * eps ** critical_exponent(self.domain.dim)
        if np.any(radii >= eps):
            raise GeometryError(
                "patch radius >= eps; the critical scaling requires "
                f"r < eps (max r = {radii.max():.6g}, eps = {eps:.6g})")
        if centers.shape[0] > 1:
            tree = cKDTree(centers)
            d, _ = tree.query(centers, k=2)
            min_gap = float(d[:, 1].min())
            if min_gap < 2.0 * eps - 1e-12:
                raise GeometryError(
                    f"centers closer than 2*eps: {min_gap:.6g} < {2*eps:.6g}")
        centers.setflags(write=False)
        tilde.setflags(write=False)
        radii.setflags(write=False)
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "tilde_r", tilde)
        object.__setattr__(self, "radii", radii)

    @property
    def num_patches(self) -> int:
        return self.centers.shape[0]

    def metric_tree(self, a_matrix=None) -> tuple:
        """KD-tree of centers in metric coordinates plus the transform."""
        chol = _as_unit_lower_cholesky(a_matrix, self.domain.dim)
        inv = np.linalg.inv(chol)
        z = self.centers @ inv.T
        return cKDTree(z), inv

    def metric_distance_to_centers(self, x, a_matrix=None):
        """(distance to nearest center, its index) in the A^(-1) metric."""
        tree, inv = self.metric_tree(a_matrix)
        x = np.asarray(x, dtype=float)
        d, idx = tree.query(x @ inv.T)
        return d, idx


def build_layout(spec: DomainSpec, epsilon: float, tilde_r,
                 c1: float = 0.1, c2: float = 10.0,
                 nested: bool = False) -> PatchLayout:
    """Periodic lattice of patch centers on the bottom face.

    Standard mode places centers at cell midpoints ``2*eps*(i + 1/2)`` along
    each lateral axis, so the patch count times ``(2*eps)**(n-1)`` tiles the
    face exactly.  Nested mode places centers at interior lattice corners
    ``2*eps*i``; corner lattices for a dyadic eps sequence are subsets of one
    another, which is what makes the constrained node sets nest in the
    energy-monotonicity checks.

    ``tilde_r`` may be a scalar or one value per patch (lexicographic center
    order).
    """
    eps = float(epsilon)
    if eps <= 0:
        raise GeometryError(f"epsilon must be positive, got {epsilon}")
    counts = []
    for L in spec.sigma_extents:
        m = L / (2.0 * eps)
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise GeometryError(
                f"2*eps = {2*eps:.6g} does not tile the face extent {L:.6g}")
        counts.append(int(round(m)))
    axes = []
    for L, m in zip(spec.sigma_extents, counts):
        if nested:
            if m < 2:
                raise GeometryError(
                    "nested layout needs at least one interior lattice "
                    f"corner; eps = {eps:.6g} is too large")
            axes.append(2.0 * eps * np.arange(1, m))
        else:
            axes.append(2.0 * eps * (np.arange(m) + 0.5))
    grids = np.meshgrid(*axes, indexing="ij")
    lateral = np.stack([g.reshape(-1) for g in grids], axis=-1)
    centers = np.concatenate(
        [lateral, np.zeros((lateral.shape[0], 1))], axis=1)
    return PatchLayout(domain=spec, epsilon=eps, centers=centers,
                       tilde_r=tilde_r, c1=c1, c2=c2, nested=nested)


def in_T_eps(layout: PatchLayout, x, a_matrix=None):
    """Membership in the closed patch region (union of metric balls) in D.

    Closed-ball convention: points at metric distance exactly ``r_k`` belong
    to the patch, matching the inner branch of the corrector profile.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    pts = np.atleast_2d(x)
    d, idx = layout.metric_distance_to_centers(pts, a_matrix)
    inside = (d <= layout.radii[idx]) & layout.domain.contains(pts)
    return bool(inside[0]) if scalar else inside


@dataclass(frozen=True)
class Mesh:
    """Uniform tensor-product grid with multilinear cells and node tags.

    Node ordering is C order over the axis index tuple with the vertical
    axis fastest, matching the Kronecker-product assembly in the fem module.
    Lateral axes drop the duplicate end node when the domain is periodic.
    """

    domain: DomainSpec
    layout: PatchLayout
    h: float
    axes: tuple
    tags: np.ndarray
    patch_nodes: tuple

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.shape))

    def node_coords(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=-1)

    def nodes_with_tag(self, tag: int) -> np.ndarray:
        return np.flatnonzero(self.tags == tag)

    @property
    def gamma_nodes(self) -> np.ndarray:
        return self.nodes_with_tag(GAMMA)

    @property
    def sigma_nodes(self) -> np.ndarray:
        return np.flatnonzero((self.tags == SIGMA_FREE)
                              | (self.tags == SIGMA_PATCH))

    @property
    def constrained_nodes(self) -> np.ndarray:
        return self.nodes_with_tag(SIGMA_PATCH)


def build_mesh(spec: DomainSpec, layout: PatchLayout, h: float,
               a_matrix=None, allow_coarse: bool = False,
               node_cap: int = 20_000_000) -> Mesh:
    """Tag a uniform grid of spacing ``h`` against the patch layout.

    Preconditions: ``h`` tiles every extent; ``h <= r_min / 2`` so each patch
    traps at least one boundary node (bypass with ``allow_coarse``, in which
    case centers must themselves be grid nodes for the tagging postcondition
    to survive); total node count within ``node_cap``.
    """
    h = float(h)
    if h <= 0:
        raise GeometryError(f"mesh spacing must be positive, got {h}")
    r_min = float(layout.radii.min())
    if h > r_min / 2.0 + 1e-12 and not allow_coarse:
        raise ResolutionError(
            f"h = {h:.6g} exceeds r_min/2 = {r_min/2:.6g}; pass "
            "allow_coarse to accept sub-resolved patches")
    axes = []
    for k, L in enumerate(spec.extents):
        m = L / h
        if abs(m - round(m)) > 1e-9:
            raise GeometryError(
                f"h = {h:.6g} does not tile extent {L:.6g} on axis {k}")
        m = int(round(m))
        periodic = spec.lateral_periodic and k < spec.dim - 1
        axes.append(h * np.arange(m if periodic else m + 1))
    shape = tuple(len(a) for a in axes)
    n_nodes = int(np.prod(shape))
    if n_nodes > node_cap:
        raise NodeBudgetError(
            f"mesh would hold {n_nodes} nodes, cap is {node_cap}")

    tags = np.zeros(shape, dtype=np.uint8)
    ext = spec.extents
    if spec.lateral_periodic:
        top = np.isclose(axes[-1], ext[-1])
        tags[..., top] = GAMMA
    else:
        for k in range(spec.dim - 1):
            sel = [slice(None)] * spec.dim
            sel[k] = np.isclose(axes[k], 0.0) | np.isclose(axes[k], ext[k])
            tags[tuple(sel)] = GAMMA
        tags[..., np.isclose(axes[-1], ext[-1])] = GAMMA
    bottom = np.isclose(axes[-1], 0.0)
    sel = tags[..., bottom]
    sel[sel == INTERIOR] = SIGMA_FREE
    tags[..., bottom] = sel

    tags = tags.reshape(-1)
    sigma = np.flatnonzero(tags == SIGMA_FREE)
    grids = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grids], axis=-1)
    d, idx = layout.metric_distance_to_centers(coords[sigma], a_matrix)
    member = d <= layout.radii[idx] * (1.0 + 1e-12)
    tags[sigma[member]] = SIGMA_PATCH

    patch_nodes = []
    owner = np.full(layout.num_patches, 0)
    tagged = sigma[member]
    tagged_owner = idx[member]
    for k in range(layout.num_patches):
        nodes = tagged[tagged_owner == k]
        owner[k] = nodes.size
        patch_nodes.append(nodes)
    if np.any(owner == 0):
        missing = int(np.flatnonzero(owner == 0)[0])
        raise ResolutionError(
            f"patch {missing} holds no boundary node at h = {h:.6g}; "
            "refine the mesh or align centers with grid nodes")

    tags.setflags(write=False)
    return Mesh(domain=spec, layout=layout, h=h,
                axes=tuple(a for a in axes), tags=tags,
                patch_nodes=tuple(patch_nodes))
