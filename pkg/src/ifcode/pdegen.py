"""Multi-fidelity PDE corpora: Poisson, heat and Burgers solvers on s x s meshes.

Every field is returned as an ``(s, s)`` array. Poisson fields are indexed
``[y, x]``; heat and Burgers fields are ``[time level, space node]`` so that
row 0 is the initial condition.
"""
from __future__ import annotations

import json
import math
import os
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import spsolve

MAGIC = b"IFCD"
FORMAT_VERSION = 1

POISSON, HEAT, BURGERS = "poisson", "heat", "burgers"


class SolverError(RuntimeError):
    pass


class CflWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class PdeSpec:
    kind: str
    ranges: tuple  # ((lo, hi), ...) per input dimension
    horizon: float = 0.0  # final time for the time-dependent problems

    @property
    def input_dim(self):
        return len(self.ranges)


SPECS = {
    # (left, right, bottom, top) boundary values, then source strength beta
    POISSON: PdeSpec(POISSON, ((0.1, 0.9),) * 5),
    # (left flux, right flux, diffusivity)
    HEAT: PdeSpec(HEAT, ((0.0, 1.0), (-1.0, 0.0), (0.01, 0.1)), horizon=5.0),
    # (viscosity,)
    BURGERS: PdeSpec(BURGERS, ((0.001, 0.1),), horizon=3.0),
}


def pde_spec(kind):
    try:
        return SPECS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown PDE kind {kind!r}; choose from {sorted(SPECS)}") from None


# -- solvers ----------------------------------------------------------------

def solve_poisson(x, s):
    """5-point Laplacian with Dirichlet sides and a point source at the centre.

    ``x = (left, right, bottom, top, beta)``; the source is ``beta / h**2`` at
    the node nearest (0.5, 0.5) (ties round up). Bottom/top rows own the corners.
    """
    left, right, bottom, top, beta = (float(v) for v in x)
    if s < 3:
        raise ValueError("mesh size must be >= 3")
    h = 1.0 / (s - 1)
    u = np.zeros((s, s))
    u[:, 0] = left
    u[:, -1] = right
    u[0, :] = bottom
    u[-1, :] = top
    n = s - 2
    # scaled system: 4 u_ij - sum(neighbours) = -h^2 f_ij
    rhs = np.zeros((n, n))
    rhs[0, :] += u[0, 1:-1]
    rhs[-1, :] += u[-1, 1:-1]
    rhs[:, 0] += u[1:-1, 0]
    rhs[:, -1] += u[1:-1, -1]
    c = s // 2
    if 1 <= c <= s - 2:
        rhs[c - 1, c - 1] -= beta
    A = poisson_matrix(n)
    sol = spsolve(A, rhs.ravel())
    resid = np.abs(A @ sol - rhs.ravel()).max()
    if not np.isfinite(resid) or resid > 1e-10:
        raise SolverError(f"Poisson solve residual {resid:.3g}")
    u[1:-1, 1:-1] = sol.reshape(n, n)
    return u


def poisson_matrix(n):
    """Sparse ``4I - neighbours`` matrix on an n x n interior grid."""
    T = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    I = sp.identity(n)
    return (sp.kron(I, T) + sp.kron(T, I)).tocsc()


def heaviside_pulse(xs):
    return np.heaviside(xs - 0.25, 1.0) - np.heaviside(xs - 0.75, 1.0)


def solve_heat(x, s, horizon=5.0):
    """Backward-Euler diffusion u_t = alpha u_xx on [0, 1] x [0, horizon].

    ``x = (q_left, q_right, alpha)`` with Neumann data u_x(0) = q_left and
    u_x(1) = q_right imposed through one-sided ghost nodes, so with zero flux
    the plain nodal sum is conserved exactly.
    """
    q_left, q_right, alpha = (float(v) for v in x)
    if s < 3:
        raise ValueError("mesh size must be >= 3")
    xs = np.linspace(0.0, 1.0, s)
    dx = 1.0 / (s - 1)
    dt = horizon / (s - 1)
    r = alpha * dt / dx**2
    # banded form of I - r * D
    ab = np.zeros((3, s))
    ab[0, 1:] = -r
    ab[1, :] = 1.0 + 2.0 * r
    ab[1, 0] = ab[1, -1] = 1.0 + r
    ab[2, :-1] = -r
    bc = np.zeros(s)
    bc[0] = -r * dx * q_left
    bc[-1] = r * dx * q_right
    out = np.empty((s, s))
    out[0] = heaviside_pulse(xs)
    for k in range(1, s):
        out[k] = solve_banded((1, 1), ab, out[k - 1] + bc)
    if not np.all(np.isfinite(out)):
        raise SolverError("heat solve produced non-finite values")
    return out


def solve_burgers(x, s, horizon=3.0, cfl=0.9, max_substeps=100000):
    """Semi-implicit Burgers u_t + u u_x = v u_xx on [0, 1] x [0, horizon].

    Diffusion is implicit (central), convection explicit first-order upwind
    with the velocity lagged from the previous level. Each output interval is
    split into substeps keeping the lagged convection at Courant number
    ``cfl``; a CflWarning is issued if ``max_substeps`` would be exceeded.
    """
    (visc,) = (float(v) for v in x)
    if s < 3:
        raise ValueError("mesh size must be >= 3")
    xs = np.linspace(0.0, 1.0, s)
    dx = 1.0 / (s - 1)
    dt_out = horizon / (s - 1)
    out = np.empty((s, s))
    out[0] = np.sin(0.5 * np.pi * xs)
    u = out[0].copy()
    n = s - 2
    for k in range(1, s):
        umax = float(np.abs(u).max())
        n_sub = max(1, math.ceil(umax * dt_out / (cfl * dx)))
        if n_sub > max_substeps:
            warnings.warn(f"Burgers convection Courant number {umax * dt_out / (max_substeps * dx):.2f} "
                          f"exceeds {cfl} at level {k}", CflWarning, stacklevel=2)
            n_sub = max_substeps
        dt = dt_out / n_sub
        r = visc * dt / dx**2
        ab = np.zeros((3, n))
        ab[0, 1:] = -r
        ab[1, :] = 1.0 + 2.0 * r
        ab[2, :-1] = -r
        for _ in range(n_sub):
            ui = u[1:-1]
            back = (ui - u[:-2]) / dx
            fwd = (u[2:] - ui) / dx
            conv = np.where(ui > 0, ui * back, ui * fwd)
            rhs = ui - dt * conv  # boundary values are zero for t > 0
            u = np.zeros(s)
            u[1:-1] = solve_banded((1, 1), ab, rhs)
        out[k] = u
    if not np.all(np.isfinite(out)):
        raise SolverError("Burgers solve produced non-finite values")
    return out


def solve(kind, x, s):
    kind = pde_spec(kind).kind
    if kind == POISSON:
        return solve_poisson(x, s)
    if kind == HEAT:
        return solve_heat(x, s)
    return solve_burgers(x, s)


# -- fidelity and resampling -----------------------------------------------

@dataclass(frozen=True)
class FidelityMap:
    s0: float
    s1: float

    def __post_init__(self):
        if not self.s1 > self.s0 >= 2:
            raise ValueError(f"need s1 > s0 >= 2, got s0={self.s0}, s1={self.s1}")

    def fidelity(self, s):
        return fidelity_of_mesh(self, s)

    def mesh(self, m):
        return self.s0 + m * (self.s1 - self.s0)


def fidelity_of_mesh(fmap: FidelityMap, s):
    if s < 2:
        raise ValueError("mesh size must be >= 2")
    return (s - fmap.s0) / (fmap.s1 - fmap.s0)


def interp_matrix(s, target):
    """(target, s) matrix of 1-D linear interpolation weights on [0, 1]."""
    if s < 2 or target < 2:
        raise ValueError("grid sizes must be >= 2")
    W = np.zeros((target, s))
    pos = np.arange(target) * ((s - 1) / (target - 1))
    i0 = np.minimum(np.floor(pos).astype(int), s - 2)
    w = pos - i0
    rows = np.arange(target)
    W[rows, i0] = 1.0 - w
    W[rows, i0 + 1] += w
    return W


def resample_field(y, target):
    """Bilinear resampling of an s x s field (or its flattening) to target x target."""
    y = np.asarray(y, dtype=np.float64)
    flat = y.ndim == 1
    if flat:
        s = math.isqrt(y.size)
        if s * s != y.size:
            raise ValueError("flat field is not square")
        y = y.reshape(s, s)
    s = y.shape[0]
    if y.shape != (s, s):
        raise ValueError("field must be square")
    if s == target:
        out = y.copy()
    else:
        W = interp_matrix(s, target)
        out = W @ y @ W.T
    return out.ravel() if flat else out


def resample_rows(Y, target):
    """Resample each row of an (n, s*s) matrix to target*target."""
    return np.stack([resample_field(row, target) for row in Y]) if len(Y) else np.zeros((0, target * target))


# -- datasets ----------------------------------------------------------------

@dataclass
class Split:
    X: np.ndarray
    m: np.ndarray
    Y: np.ndarray
    mesh: np.ndarray

    def __len__(self):
        return len(self.m)

    @property
    def d(self):
        return self.Y.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64) if len(idx) == 0 else np.asarray(idx)
        return Split(self.X[idx], self.m[idx], self.Y[idx], self.mesh[idx])

    def fidelities(self):
        return np.unique(self.m)


@dataclass
class FidelityDataset:
    kind: str
    ranges: tuple
    meshes: list
    counts: list
    test_mesh: int
    seed: int
    fidelity_map: FidelityMap | None
    train: Split
    test: Split
    extra: dict = field(default_factory=dict)

    @property
    def d(self):
        return max(self.meshes) ** 2

    @property
    def d_test(self):
        return self.test_mesh ** 2

    @property
    def output_mesh(self):
        return max(self.meshes)

    def fidelity(self, s):
        return 0.0 if self.fidelity_map is None else fidelity_of_mesh(self.fidelity_map, s)

    def manifest(self):
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "ranges": [list(r) for r in self.ranges],
            "input_dim": len(self.ranges),
            "meshes": list(self.meshes),
            "counts": list(self.counts),
            "test_mesh": self.test_mesh,
            "test_count": len(self.test),
            "seed": self.seed,
            "fidelity_map": None if self.fidelity_map is None
            else {"s0": self.fidelity_map.s0, "s1": self.fidelity_map.s1},
            "d": self.d,
            "d_test": self.d_test,
            "files": {"train": "train.bin", "test": "test.bin"},
            **self.extra,
        }


def sample_inputs(spec: PdeSpec, n, rng, avoid=None, min_dist=1e-6):
    """Uniform draws in the input box, rejecting points within ``min_dist`` of
    any earlier draw or of ``avoid``."""
    lo = np.array([r[0] for r in spec.ranges])
    hi = np.array([r[1] for r in spec.ranges])
    taken = [] if avoid is None else [np.asarray(a) for a in avoid]
    out = []
    while len(out) < n:
        cand = lo + (hi - lo) * rng.random(len(lo))
        if any(np.linalg.norm(cand - t) < min_dist for t in taken):
            continue
        taken.append(cand)
        out.append(cand)
    return np.array(out).reshape(n, len(lo))


def _solve_job(args):
    kind, x, s, target = args
    with warnings.catch_warnings():
        warnings.simplefilter("default", CflWarning)
        field_ = solve(kind, x, s)
    return resample_field(field_, target).ravel()


def _solve_all(kind, X, meshes, target, workers):
    jobs = [(kind, x, int(s), target) for x, s in zip(X, meshes)]
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_solve_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        rows = [_solve_job(j) for j in jobs]
    return np.array(rows).reshape(len(jobs), target * target)


def generate_dataset(spec, meshes, counts, test_count, seed, test_mesh=None, workers=1):
    """Solve the PDE at each mesh size and collect a fidelity-tagged corpus.

    Training outputs are resampled to the finest training mesh; test outputs
    are solved on ``test_mesh`` (default: finest training mesh) and stored at
    that resolution.
    """
    if isinstance(spec, str):
        spec = pde_spec(spec)
    meshes = [int(s) for s in meshes]
    counts = [int(c) for c in counts]
    if not meshes:
        raise ValueError("mesh list is empty")
    if len(counts) != len(meshes):
        raise ValueError("need one count per mesh")
    if any(b <= a for a, b in zip(meshes, meshes[1:])):
        raise ValueError("mesh sizes must be strictly ascending")
    test_mesh = int(test_mesh or meshes[-1])
    fmap = FidelityMap(meshes[0], meshes[-1]) if len(meshes) > 1 else None
    rng = np.random.default_rng(seed)

    n_train = sum(counts)
    X_train = sample_inputs(spec, n_train, rng)
    X_test = sample_inputs(spec, test_count, rng, avoid=list(X_train))
    mesh_train = np.repeat(meshes, counts).astype(np.int64)
    fid = (lambda s: 0.0) if fmap is None else fmap.fidelity
    m_train = np.array([fid(s) for s in mesh_train], dtype=np.float64)
    m_test = np.full(test_count, fid(test_mesh), dtype=np.float64)

    target = meshes[-1]
    Y_train = _solve_all(spec.kind, X_train, mesh_train, target, workers)
    Y_test = _solve_all(spec.kind, X_test, [test_mesh] * test_count, test_mesh, workers)
    return FidelityDataset(
        kind=spec.kind, ranges=spec.ranges, meshes=meshes, counts=counts,
        test_mesh=test_mesh, seed=seed, fidelity_map=fmap,
        train=Split(X_train, m_train, Y_train, mesh_train),
        test=Split(X_test, m_test, Y_test, np.full(test_count, test_mesh, dtype=np.int64)),
    )


# -- on-disk format -----------------------------------------------------------

def write_split(path, split: Split):
    rows = np.hstack([split.X, split.m[:, None], split.Y]).astype("<f8")
    n, width = rows.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", FORMAT_VERSION, n, width))
        fh.write(rows.tobytes())


def read_split_rows(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != MAGIC:
            raise ValueError(f"{path}: not an IFCD file")
        version, n, width = struct.unpack("<III", head[4:])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * width:
        raise ValueError(f"{path}: truncated ({data.size} of {n * width} values)")
    return data.reshape(n, width).astype(np.float64)


def save_dataset(ds: FidelityDataset, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(ds.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_split(os.path.join(directory, "train.bin"), ds.train)
    write_split(os.path.join(directory, "test.bin"), ds.test)


def load_dataset(directory) -> FidelityDataset:
    with open(os.path.join(directory, "manifest.json")) as fh:
        man = json.load(fh)
    p = man["input_dim"]
    fm = man["fidelity_map"]
    fmap = None if fm is None else FidelityMap(fm["s0"], fm["s1"])

    def split(name, meshes):
        rows = read_split_rows(os.path.join(directory, man["files"][name]))
        return Split(rows[:, :p], rows[:, p], rows[:, p + 1:], np.asarray(meshes, dtype=np.int64))

    train = split("train", np.repeat(man["meshes"], man["counts"]))
    test = split("test", [man["test_mesh"]] * man["test_count"])
    known = {"format_version", "kind", "ranges", "input_dim", "meshes", "counts", "test_mesh",
             "test_count", "seed", "fidelity_map", "d", "d_test", "files"}
    return FidelityDataset(
        kind=man["kind"], ranges=tuple(tuple(r) for r in man["ranges"]), meshes=man["meshes"],
        counts=man["counts"], test_mesh=man["test_mesh"], seed=man["seed"], fidelity_map=fmap,
        train=train, test=test, extra={k: v for k, v in man.items() if k not in known},
    )
