"""Linear delayed jump-diffusion model, input sets, history segments.

The model is

    dx = (A1 x + A2 x(t - tau1) + B u + offset) dt
         + sum_i (G_i x + Gbar_i x(t - tau2)) dW^i
         + sum_i (R_i x + Rbar_i x(t - tau3)) dP^i

where P^i are Poisson counters with rates lam[i]. The constant drift
``offset`` (zero by default) lets affine models such as the ten-room
benchmark be written directly; it cancels in every incremental quantity.
"""
import hashlib
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInputSet,
    EtaExceedsSpan,
    ModelFileError,
    TauMismatch,
)
from .jacobi import spectral_norm

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


def _mat(a, shape, name):
    a = np.array(a, dtype=float)
    if a.shape != shape:
        raise DimensionMismatch(f"{name}: expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DimensionMismatch(f"{name}: non-finite entries")
    a.setflags(write=False)
    return a


def _stack(mats, n, name):
    mats = [] if mats is None else list(mats)
    if len(mats) == 0:
        out = np.zeros((0, n, n))
    else:
        out = np.stack([_mat(g, (n, n), f"{name}[{i}]") for i, g in enumerate(mats)])
    out.setflags(write=False)
    return out


class LinearDjdsModel:
    """Matrices, rates and delays of a linear DJDS. Immutable after construction."""

    def __init__(self, A1, A2, B, G=None, Gbar=None, R=None, Rbar=None, lam=None,
                 tau1=0.0, tau2=0.0, tau3=0.0, offset=None):
        A1 = np.atleast_2d(np.asarray(A1, dtype=float))
        n = A1.shape[0]
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(n, -1)
        m = B.shape[1]
        self.n, self.m = n, m
        self.A1 = _mat(A1, (n, n), "A1")
        self.A2 = _mat(np.atleast_2d(A2), (n, n), "A2")
        self.B = _mat(B, (n, m), "B")
        self.G = _stack(G, n, "G")
        self.Gbar = _stack(Gbar if Gbar is not None else [np.zeros((n, n))] * len(self.G), n, "Gbar")
        if len(self.G) != len(self.Gbar):
            raise DimensionMismatch("G and Gbar must have the same length")
        self.R = _stack(R, n, "R")
        self.Rbar = _stack(Rbar if Rbar is not None else [np.zeros((n, n))] * len(self.R), n, "Rbar")
        if len(self.R) != len(self.Rbar):
            raise DimensionMismatch("R and Rbar must have the same length")
        lam = np.zeros(len(self.R)) if lam is None else np.array(lam, dtype=float).reshape(-1)
        if lam.shape != (len(self.R),):
            raise DimensionMismatch("lam must have one rate per reset matrix")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise DimensionMismatch("Poisson rates must be finite and nonnegative")
        lam.setflags(write=False)
        self.lam = lam
        for name, t in (("tau1", tau1), ("tau2", tau2), ("tau3", tau3)):
            if not (t >= 0 and math.isfinite(t)):
                raise DimensionMismatch(f"{name} must be finite and nonnegative")
        self.tau1, self.tau2, self.tau3 = float(tau1), float(tau2), float(tau3)
        self.offset = _mat(np.zeros(n) if offset is None else np.reshape(offset, -1), (n,), "offset")

    @property
    def tau(self):
        return max(self.tau1, self.tau2, self.tau3)

    @property
    def r_bar(self):
        return len(self.G)

    @property
    def r_tilde(self):
        return len(self.R)

    @property
    def noiseless(self):
        return not (np.any(self.G) or np.any(self.Gbar)
                    or (np.any(self.lam > 0) and (np.any(self.R) or np.any(self.Rbar))))

    def drift_free_of_delay(self):
        return not np.any(self.A2)

    def to_dict(self):
        return {
            "n": self.n, "m": self.m,
            "tau1": self.tau1, "tau2": self.tau2, "tau3": self.tau3,
            "A1": self.A1.tolist(), "A2": self.A2.tolist(), "B": self.B.tolist(),
            "offset": self.offset.tolist(),
            "G": self.G.tolist(), "Gbar": self.Gbar.tolist(),
            "R": self.R.tolist(), "Rbar": self.Rbar.tolist(),
            "lambda": self.lam.tolist(),
        }

    def hash(self):
        """sha256 of the canonical JSON form; ties artifacts to the model."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def __repr__(self):
        return (f"LinearDjdsModel(n={self.n}, m={self.m}, r_bar={self.r_bar}, "
                f"r_tilde={self.r_tilde}, tau={self.tau:g})")


# ---------------------------------------------------------------- inputs

@dataclass(frozen=True)
class InputSpace:
    """Either a finite union of boxes or an explicit finite point list."""
    boxes: tuple = ()
    explicit_points: tuple = None

    def __post_init__(self):
        has_boxes = len(self.boxes) > 0
        has_points = self.explicit_points is not None
        if has_boxes == has_points:
            raise EmptyInputSet("exactly one of boxes / explicit_points must be given")
        if has_boxes:
            boxes = []
            for lo, hi in self.boxes:
                lo = np.atleast_1d(np.asarray(lo, dtype=float))
                hi = np.atleast_1d(np.asarray(hi, dtype=float))
                if lo.shape != hi.shape or np.any(lo >= hi):
                    raise EmptyInputSet("each box needs lo < hi per coordinate")
                boxes.append((tuple(lo), tuple(hi)))
            dims = {len(b[0]) for b in boxes}
            if len(dims) != 1:
                raise DimensionMismatch("boxes have different dimensions")
            object.__setattr__(self, "boxes", tuple(boxes))
        else:
            pts = np.atleast_2d(np.asarray(self.explicit_points, dtype=float))
            if pts.size == 0:
                raise EmptyInputSet("explicit point list is empty")
            object.__setattr__(self, "explicit_points", tuple(tuple(p) for p in pts))

    @classmethod
    def from_points(cls, points):
        return cls(explicit_points=points)

    @classmethod
    def from_boxes(cls, boxes):
        return cls(boxes=tuple(boxes))

    @property
    def dim(self):
        if self.explicit_points is not None:
            return len(self.explicit_points[0])
        return len(self.boxes[0][0])

    def span(self):
        """Smallest side length over all boxes; inf for explicit point sets."""
        if self.explicit_points is not None:
            return math.inf
        return min(min(h - l for l, h in zip(lo, hi)) for lo, hi in self.boxes)

    def contains(self, u, tol=1e-12):
        u = np.asarray(u, dtype=float)
        if self.explicit_points is not None:
            return any(np.allclose(u, p, atol=tol, rtol=0) for p in self.explicit_points)
        return any(np.all(u >= np.array(lo) - tol) and np.all(u <= np.array(hi) + tol)
                   for lo, hi in self.boxes)


@dataclass(frozen=True)
class QuantizedInputSet:
    """Finite ordered input alphabet; position in ``points`` is the input id."""
    eta: float
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float)).copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def q(self):
        return len(self.points)

    def index_of(self, u):
        u = np.asarray(u, dtype=float)
        hits = np.flatnonzero(np.all(np.abs(self.points - u) <= 1e-12, axis=1))
        if len(hits) == 0:
            raise KeyError(f"{u} is not a quantized input")
        return int(hits[0])

    def sup_norm(self):
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    def to_dict(self):
        return {"eta": self.eta, "points": self.points.tolist()}


def quantize(input_space, eta):
    """Lattice approximation of an input set, lexicographically ordered.

    Box sets use the lattice z_i = k_i * eta / sqrt(m); explicit point sets
    are returned unchanged with eta recorded as 0.
    """
    if input_space.explicit_points is not None:
        pts = np.array(input_space.explicit_points, dtype=float)
        _, first = np.unique(pts, axis=0, return_index=True)
        return QuantizedInputSet(0.0, pts[np.sort(first)])
    if not eta > 0:
        raise EtaExceedsSpan("eta must be positive for box input sets")
    if eta > input_space.span() * (1 + 1e-12):
        raise EtaExceedsSpan(f"eta={eta} exceeds span={input_space.span()}")
    m = input_space.dim
    step = eta / math.sqrt(m)
    found = set()
    for lo, hi in input_space.boxes:
        axes = []
        for l, h in zip(lo, hi):
            k0 = math.ceil(l / step - 1e-9)
            k1 = math.floor(h / step + 1e-9)
            axes.append(range(k0, k1 + 1))
        for ks in itertools.product(*axes):
            found.add(ks)
    if not found:
        raise EmptyInputSet("quantized input set is empty")
    ks = np.array(sorted(found), dtype=float)
    return QuantizedInputSet(float(eta), ks * step)


# ---------------------------------------------------------------- history segments

class HistorySegment:
    """Samples of a function on [-tau, 0] on a uniform grid.

    values[j] = zeta(-tau + j * grid_step); tau must be an integer multiple
    of grid_step. Evaluation between nodes is linear interpolation. The
    sup-norm is the max over nodes, i.e. the exact sup of the interpolant.
    """

    def __init__(self, values, grid_step, tau):
        values = np.array(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        tau = float(tau)
        grid_step = float(grid_step)
        if not grid_step > 0:
            raise ValueError("grid_step must be positive")
        k = tau / grid_step
        K = int(round(k))
        if abs(k - K) > 1e-9 * max(1.0, k):
            raise ValueError(f"tau={tau} is not a multiple of grid_step={grid_step}")
        if values.shape[0] != K + 1:
            raise ValueError(f"expected {K + 1} samples, got {values.shape[0]}")
        values.setflags(write=False)
        self.values = values
        self.grid_step = grid_step
        self.tau = tau

    @classmethod
    def constant(cls, value, tau, grid_step=None, n=None):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        if n is not None and value.size == 1:
            value = np.full(n, value[0])
        if tau == 0:
            return cls(value[None, :], 1.0 if grid_step is None else grid_step, 0.0)
        if grid_step is None:
            grid_step = tau
        K = int(round(tau / grid_step))
        return cls(np.tile(value, (K + 1, 1)), grid_step, tau)

    @property
    def n(self):
        return self.values.shape[1]

    @property
    def nodes(self):
        return -self.tau + self.grid_step * np.arange(len(self.values))

    def __call__(self, theta):
        return self.evaluate(theta)

    def evaluate(self, theta):
        """Linear interpolation; theta outside [-tau, 0] is clamped."""
        theta = np.asarray(theta, dtype=float)
        if len(self.values) == 1:
            return np.broadcast_to(self.values[0], theta.shape + (self.n,)).copy()
        x = (np.clip(theta, -self.tau, 0.0) + self.tau) / self.grid_step
        j = np.clip(np.floor(x).astype(int), 0, len(self.values) - 2)
        w = (x - j)[..., None]
        return (1 - w) * self.values[j] + w * self.values[j + 1]

    def sup_norm(self):
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def resample(self, grid_step):
        if self.tau == 0:
            return HistorySegment(self.values, grid_step, 0.0)
        K = int(round(self.tau / grid_step))
        return HistorySegment(self.evaluate(-self.tau + grid_step * np.arange(K + 1)),
                              grid_step, self.tau)

    def __repr__(self):
        return f"HistorySegment(tau={self.tau:g}, step={self.grid_step:g}, n={self.n})"


def merged_nodes(a, b):
    if a.tau == 0:
        return np.zeros(1)
    return np.unique(np.concatenate([a.nodes, b.nodes]))


def sup_distance(a, b):
    """Sup over [-tau, 0] of ||a - b|| for two piecewise-linear segments.

    The difference is piecewise linear on the merged grid, so its max norm
    is attained at a merged-grid node.
    """
    if abs(a.tau - b.tau) > 1e-9 * max(1.0, a.tau):
        raise TauMismatch(f"segments have tau {a.tau} and {b.tau}")
    if a.n != b.n:
        raise DimensionMismatch("segments have different dimensions")
    if a.grid_step == b.grid_step and len(a.values) == len(b.values):
        d = a.values - b.values
    else:
        t = merged_nodes(a, b)
        d = a.evaluate(t) - b.evaluate(t)
    return float(np.max(np.linalg.norm(d, axis=1)))


# ---------------------------------------------------------------- regions

@dataclass(frozen=True)
class OperatingRegion:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi) or any(l >= h for l, h in zip(lo, hi)):
            raise ValueError("region needs lo < hi per coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def uniform(cls, lo, hi, n):
        return cls((lo,) * n, (hi,) * n)

    def diameter(self):
        return float(np.linalg.norm(np.array(self.hi) - np.array(self.lo)))


# ---------------------------------------------------------------- Lipschitz constants

def lipschitz_constants(model):
    """Conservative (Lf, Lu, Lg, Lr) from spectral norms of the model matrices."""
    Lf = spectral_norm(model.A1) + spectral_norm(model.A2)
    Lu = spectral_norm(model.B)
    Lg = sum(spectral_norm(g) + spectral_norm(gb) for g, gb in zip(model.G, model.Gbar))
    Lr = sum(spectral_norm(r) + spectral_norm(rb) for r, rb in zip(model.R, model.Rbar))
    return float(Lf), float(Lu), float(Lg), float(Lr)


# ---------------------------------------------------------------- model files

_MODEL_KEYS = {
    "n", "m", "tau1", "tau2", "tau3", "A1", "A2", "B", "offset",
    "G", "Gbar", "R", "Rbar", "G_diag", "Gbar_diag", "R_diag", "Rbar_diag", "lambda",
}
_INPUT_KEYS = {"points", "boxes"}
_REGION_KEYS = {"lo", "hi"}


def _check_keys(table, allowed, where):
    if not isinstance(table, dict):
        raise ModelFileError(f"[{where}] must be a table")
    extra = set(table) - allowed
    if extra:
        raise ModelFileError(f"unknown key(s) in [{where}]: {', '.join(sorted(extra))}")


def _expand(vec, n, count, name):
    """Per-channel diagonal shorthand: scalar or length-n vector per channel."""
    mats = []
    for i, d in enumerate(vec):
        d = np.asarray(d, dtype=float)
        if d.ndim == 0:
            mats.append(d * np.eye(n))
        elif d.shape == (n,):
            mats.append(np.diag(d))
        else:
            raise ModelFileError(f"{name}[{i}] must be a scalar or length-n list")
    return mats


def _unit_channels(values, n):
    # "G_diag = [g1, ..., gn]" means channel i acts on coordinate i only
    return [v * np.outer(np.eye(n)[i], np.eye(n)[i]) for i, v in enumerate(values)]


def parse_model_document(doc):
    """Build (model, input_space, region) from a parsed key-value document."""
    extra = set(doc) - {"model", "input", "region"}
    if extra:
        raise ModelFileError(f"unknown section(s): {', '.join(sorted(extra))}")
    if "model" not in doc or "input" not in doc:
        raise ModelFileError("model file needs [model] and [input] sections")
    md = doc["model"]
    _check_keys(md, _MODEL_KEYS, "model")
    try:
        n = int(md["n"])
        m = int(md["m"])

        def mat(key, shape, default=None):
            if key not in md:
                if default is None:
                    raise ModelFileError(f"[model] is missing {key}")
                return default
            return np.array(md[key], dtype=float).reshape(shape)

        A1 = mat("A1", (n, n))
        A2 = mat("A2", (n, n), np.zeros((n, n)))
        B = mat("B", (n, m))
        offset = mat("offset", (n,), np.zeros(n))

        def channels(full, diag):
            if full in md and diag in md:
                raise ModelFileError(f"give either {full} or {diag}, not both")
            if full in md:
                return [np.array(g, dtype=float).reshape(n, n) for g in md[full]]
            if diag in md:
                vals = md[diag]
                if len(vals) != n:
                    raise ModelFileError(f"{diag} needs one value per coordinate")
                return _unit_channels(np.array(vals, dtype=float), n)
            return None

        G = channels("G", "G_diag")
        Gbar = channels("Gbar", "Gbar_diag")
        R = channels("R", "R_diag")
        Rbar = channels("Rbar", "Rbar_diag")
        if G is None and Gbar is not None:
            G = [np.zeros((n, n))] * len(Gbar)
        if R is None and Rbar is not None:
            R = [np.zeros((n, n))] * len(Rbar)
        lam = md.get("lambda", [])
        if np.ndim(lam) == 0:
            lam = [float(lam)] * (len(R) if R else 0)
        model = LinearDjdsModel(
            A1, A2, B, G=G, Gbar=Gbar, R=R, Rbar=Rbar, lam=lam,
            tau1=float(md.get("tau1", 0.0)), tau2=float(md.get("tau2", 0.0)),
            tau3=float(md.get("tau3", 0.0)), offset=offset)
    except (ValueError, TypeError, KeyError, DimensionMismatch) as exc:
        raise ModelFileError(f"invalid [model]: {exc}") from exc

    inp = doc["input"]
    _check_keys(inp, _INPUT_KEYS, "input")
    try:
        if "points" in inp and "boxes" not in inp:
            space = InputSpace.from_points(inp["points"])
        elif "boxes" in inp and "points" not in inp:
            space = InputSpace.from_boxes([(b[0], b[1]) for b in inp["boxes"]])
        else:
            raise ModelFileError("[input] needs exactly one of points / boxes")
    except (ValueError, TypeError, IndexError, EmptyInputSet, DimensionMismatch) as exc:
        raise ModelFileError(f"invalid [input]: {exc}") from exc
    if space.dim != model.m:
        raise ModelFileError(f"inputs have dimension {space.dim}, model expects m={model.m}")

    region = None
    if "region" in doc:
        rg = doc["region"]
        _check_keys(rg, _REGION_KEYS, "region")
        try:
            lo = np.broadcast_to(np.asarray(rg["lo"], dtype=float), (n,))
            hi = np.broadcast_to(np.asarray(rg["hi"], dtype=float), (n,))
            region = OperatingRegion(tuple(lo), tuple(hi))
        except (KeyError, ValueError) as exc:
            raise ModelFileError(f"invalid [region]: {exc}") from exc
    return model, space, region


def load_model_file(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ModelFileError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ModelFileError(f"cannot parse {path}: {exc}") from exc
    return parse_model_document(doc)
