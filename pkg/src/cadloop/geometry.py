"""Parametric part generation on structured hexahedral meshes.

Every category maps a parameter vector to either a union of axis-aligned
boxes or a swept annulus. Both are meshed directly as structured 8-node
hexahedra, the boundary is extracted from unshared element faces and each
boundary facet is assigned to a named face group. Two anchors (``load`` and
``fixed``) sit on designated groups so that boundary conditions can be
re-identified after any reparameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateGeometry, InvalidParams, NoFaceMatched

# Local face node orderings of the hex-8 element; each yields an outward
# normal by the right-hand rule.
HEX_FACES = np.array(
    [
        [0, 3, 2, 1],  # zeta = -1
        [4, 5, 6, 7],  # zeta = +1
        [0, 1, 5, 4],  # eta = -1
        [2, 3, 7, 6],  # eta = +1
        [0, 4, 7, 3],  # xi = -1
        [1, 2, 6, 5],  # xi = +1
    ]
)

HEX_CORNERS = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=float,
)

GAUSS_2 = 1.0 / math.sqrt(3.0)

# Elements per axis are capped at ELEMENT_CAP * resolution (plus feature
# intervals) so thin parts do not explode the element count.
ELEMENT_CAP = 10


@dataclass(frozen=True)
class ParamSpec:
    name: str
    lower: float
    upper: float
    unit: str = "mm"

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)) or self.lower >= self.upper:
            raise ValueError(f"bad bounds for {self.name}: [{self.lower}, {self.upper}]")


@dataclass(frozen=True)
class Patch:
    """A rectangular sub-region of a boundary plane promoted to its own face group."""

    label: str
    axis: int
    sign: int
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass(frozen=True)
class BoxUnion:
    boxes: tuple[tuple[tuple[float, float, float], tuple[float, float, float]], ...]
    patches: tuple[Patch, ...] = ()
    names: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Ring:
    r_in: float
    r_out: float
    thickness: float


@dataclass(frozen=True)
class PartCategory:
    """A parametric part template.

    ``load_face`` and ``fixed_face`` name the face groups carrying the two
    anchors. ``stiffness_params`` and ``bulk_params`` document which
    dimensions mostly drive stiffness and material volume; the baseline
    agents use them.
    """

    id: str
    params: tuple[ParamSpec, ...]
    load_face: str
    fixed_face: str
    blueprint: Callable[[dict], BoxUnion | Ring]
    check: Callable[[dict], str | None]
    stiffness_params: tuple[str, ...]
    bulk_params: tuple[str, ...]
    default_pressure: float
    description: str
    holdout: bool = False

    def __post_init__(self):
        if not self.params:
            raise ValueError("a category needs at least one parameter")
        if not self.load_face or not self.fixed_face:
            raise ValueError("a category needs a load anchor and a fixed anchor")

    @property
    def param_names(self) -> list[str]:
        return [p.name for p in self.params]

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.params])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.params])

    def as_dict(self, values: Sequence[float]) -> dict:
        return dict(zip(self.param_names, (float(v) for v in values)))

    def clamp(self, values: Sequence[float]) -> list[float]:
        return [min(max(float(v), p.lower), p.upper) for v, p in zip(values, self.params)]

    def schema(self) -> dict:
        return {
            "id": self.id,
            "params": [
                {"name": p.name, "unit": p.unit, "lower": p.lower, "upper": p.upper}
                for p in self.params
            ],
            "load_face": self.load_face,
            "fixed_face": self.fixed_face,
        }


@dataclass(frozen=True)
class Anchor:
    label: str  # "load" or "fixed"
    point: tuple[float, float, float]
    face: str


@dataclass
class FaceGroup:
    label: str
    facets: np.ndarray  # indices into MeshModel.facets


@dataclass
class MeshModel:
    category: str
    params: tuple[float, ...]
    resolution: int
    nodes: np.ndarray  # (N, 3) mm
    elements: np.ndarray  # (E, 8) node indices
    facets: np.ndarray  # (F, 4) boundary quads, outward orientation
    facet_group: np.ndarray  # (F,) index into group_labels
    group_labels: list[str]
    anchors: list[Anchor]
    volume_mm3: float
    bbox_diag: float

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def face_groups(self) -> list[FaceGroup]:
        return [
            FaceGroup(lbl, np.flatnonzero(self.facet_group == j))
            for j, lbl in enumerate(self.group_labels)
        ]

    def group_index(self, label: str) -> int:
        return self.group_labels.index(label)

    def anchor(self, label: str) -> Anchor:
        for a in self.anchors:
            if a.label == label:
                return a
        raise NoFaceMatched(f"mesh has no anchor labelled {label!r}")

    def facet_normals(self) -> np.ndarray:
        return _quad_normals(self.nodes[self.facets])[0]

    def facet_areas(self) -> np.ndarray:
        return _quad_normals(self.nodes[self.facets])[1]

    def group_nodes(self, groups) -> np.ndarray:
        mask = np.isin(self.facet_group, list(groups))
        return np.unique(self.facets[mask])

    def group_area(self, groups) -> float:
        mask = np.isin(self.facet_group, list(groups))
        return float(self.facet_areas()[mask].sum())

    def default_eps(self) -> float:
        return 1e-4 * self.bbox_diag


# ---------------------------------------------------------------------------
# Category library
# ---------------------------------------------------------------------------


def _box(x0, x1, y0, y1, z0, z1):
    return ((float(x0), float(y0), float(z0)), (float(x1), float(y1), float(z1)))


def _positive(p: dict, *names) -> str | None:
    for n in names:
        if p[n] <= 0:
            return f"{n} must be positive (got {p[n]})"
    return None


def _tip_pad(L, W, z, frac):
    pad = frac * L
    return Patch("tip_pad", 2, +1, (L - pad, 0.0, z), (L, W, z))


def _rect_plate(p):
    L, W, T = p["L"], p["W"], p["T"]
    return BoxUnion((_box(0, L, 0, W, 0, T),), names={"x-0": "clamped_edge", "z+0": "top"})


def _cantilever(p):
    L, b, h = p["L"], p["b"], p["h"]
    return BoxUnion(
        (_box(0, L, 0, b, 0, h),),
        patches=(_tip_pad(L, b, h, 0.02),),
        names={"x-0": "root", "x+0": "free_end", "z+0": "top"},
    )


def _i_beam(p):
    L, H, fw, ft, wt = p["L"], p["H"], p["flange_w"], p["flange_t"], p["web_t"]
    y0, y1 = 0.5 * (fw - wt), 0.5 * (fw + wt)
    return BoxUnion(
        (
            _box(0, L, 0, fw, 0, ft),
            _box(0, L, y0, y1, ft, H - ft),
            _box(0, L, 0, fw, H - ft, H),
        ),
        patches=(_tip_pad(L, fw, H, 0.1),),
        names={"x-0": "root", "z+1": "top"},
    )


def _i_beam_check(p):
    msg = _positive(p, "L", "H", "flange_w", "flange_t", "web_t")
    if msg:
        return msg
    if 2 * p["flange_t"] >= p["H"]:
        return "flanges leave no web height"
    if p["web_t"] >= p["flange_w"]:
        return "web is wider than the flanges"
    return None


def _l_bracket(p):
    a, b, w, t = p["leg_a"], p["leg_b"], p["width"], p["thickness"]
    mount = Patch("upper_mount", 0, -1, (0.0, 0.0, 0.5 * b), (0.0, w, b))
    return BoxUnion(
        (_box(0, a, 0, w, 0, t), _box(0, t, 0, w, 0, b)),
        patches=(mount,),
        names={"z+0": "shelf_top"},
    )


def _l_bracket_check(p):
    msg = _positive(p, "leg_a", "leg_b", "width", "thickness")
    if msg:
        return msg
    if p["thickness"] >= min(p["leg_a"], p["leg_b"]):
        return "thickness consumes a leg"
    return None


def _hollow_box(p):
    L, W, H, t = p["L"], p["W"], p["H"], p["wall_t"]
    return BoxUnion(
        (
            _box(0, L, 0, W, 0, t),
            _box(0, L, 0, W, H - t, H),
            _box(0, L, 0, t, t, H - t),
            _box(0, L, W - t, W, t, H - t),
        ),
        patches=(_tip_pad(L, W, H, 0.1),),
        names={"x-0": "root", "z+1": "top"},
    )


def _hollow_box_check(p):
    msg = _positive(p, "L", "W", "H", "wall_t")
    if msg:
        return msg
    if 2 * p["wall_t"] >= min(p["W"], p["H"]):
        return "walls leave no cavity (non-positive inner size)"
    return None


def _flange(p):
    return Ring(0.5 * p["inner_d"], 0.5 * p["outer_d"], p["T"])


def _flange_check(p):
    msg = _positive(p, "outer_d", "inner_d", "T")
    if msg:
        return msg
    if p["inner_d"] >= p["outer_d"]:
        return "bore is not smaller than the outer diameter"
    return None


def _t_bracket(p):
    fw, sh, w, t = p["flange_w"], p["stem_h"], p["width"], p["thickness"]
    x0, x1 = 0.5 * (fw - t), 0.5 * (fw + t)
    return BoxUnion(
        (_box(0, fw, 0, w, sh, sh + t), _box(x0, x1, 0, w, 0, sh)),
        names={"z-0": "stem_foot", "z+0": "flange_top"},
    )


def _t_bracket_check(p):
    msg = _positive(p, "flange_w", "stem_h", "width", "thickness")
    if msg:
        return msg
    if p["thickness"] >= p["flange_w"]:
        return "stem is wider than the flange"
    return None


def _stepped_plate(p):
    L1, L2, W, T1, T2 = p["L1"], p["L2"], p["W"], p["T1"], p["T2"]
    return BoxUnion(
        (_box(0, L1, 0, W, 0, T1), _box(L1, L1 + L2, 0, W, 0, T2)),
        names={"x-0": "clamped_edge", "z+0": "thin_top"},
    )


def _stepped_check(p):
    msg = _positive(p, "L1", "L2", "W", "T1", "T2")
    if msg:
        return msg
    if p["T2"] >= p["T1"]:
        return "the thin step must be thinner than the thick step"
    return None


def _simple_check(*names):
    return lambda p: _positive(p, *names)


def _P(name, lo, hi):
    return ParamSpec(name, float(lo), float(hi))


CATEGORIES: dict[str, PartCategory] = {
    c.id: c
    for c in [
        PartCategory(
            "rect_plate",
            (_P("L", 60, 140), _P("W", 30, 80), _P("T", 3, 10)),
            load_face="top",
            fixed_face="clamped_edge",
            blueprint=_rect_plate,
            check=_simple_check("L", "W", "T"),
            stiffness_params=("T",),
            bulk_params=("W",),
            default_pressure=0.4,
            description="rectangular plate clamped along one short edge, pressure on the top face",
        ),
        PartCategory(
            "cantilever_beam",
            (_P("L", 60, 150), _P("b", 6, 20), _P("h", 6, 20)),
            load_face="tip_pad",
            fixed_face="root",
            blueprint=_cantilever,
            check=_simple_check("L", "b", "h"),
            stiffness_params=("h",),
            bulk_params=("b",),
            default_pressure=35.0,
            description="solid rectangular cantilever, root clamped, pressure on a pad at the free end",
        ),
        PartCategory(
            "i_beam_cantilever",
            (
                _P("L", 100, 200),
                _P("H", 20, 50),
                _P("flange_w", 15, 40),
                _P("flange_t", 2, 6),
                _P("web_t", 2, 6),
            ),
            load_face="tip_pad",
            fixed_face="root",
            blueprint=_i_beam,
            check=_i_beam_check,
            stiffness_params=("H", "flange_t"),
            bulk_params=("flange_w", "web_t"),
            default_pressure=7.0,
            description="I-section cantilever, root clamped, pressure on the top flange near the tip",
        ),
        PartCategory(
            "l_bracket",
            (_P("leg_a", 40, 100), _P("leg_b", 30, 80), _P("width", 20, 60), _P("thickness", 3, 10)),
            load_face="shelf_top",
            fixed_face="upper_mount",
            blueprint=_l_bracket,
            check=_l_bracket_check,
            stiffness_params=("thickness",),
            bulk_params=("width",),
            default_pressure=0.75,
            description="L bracket bolted on the upper half of its back face, pressure on the shelf",
        ),
        PartCategory(
            "hollow_box_beam",
            (_P("L", 100, 250), _P("W", 20, 50), _P("H", 20, 60), _P("wall_t", 1.5, 5)),
            load_face="tip_pad",
            fixed_face="root",
            blueprint=_hollow_box,
            check=_hollow_box_check,
            stiffness_params=("H", "wall_t"),
            bulk_params=("W",),
            default_pressure=5.5,
            description="rectangular tube cantilever, root clamped, pressure on the top near the tip",
        ),
        PartCategory(
            "flat_flange",
            (_P("outer_d", 80, 200), _P("inner_d", 20, 60), _P("T", 4, 16)),
            load_face="top",
            fixed_face="inner",
            blueprint=_flange,
            check=_flange_check,
            stiffness_params=("T",),
            bulk_params=("outer_d",),
            default_pressure=3.0,
            description="flat annular flange held on its bore, pressure on the top face",
        ),
        PartCategory(
            "t_bracket",
            (_P("flange_w", 40, 120), _P("stem_h", 20, 60), _P("width", 20, 60), _P("thickness", 3, 10)),
            load_face="flange_top",
            fixed_face="stem_foot",
            blueprint=_t_bracket,
            check=_t_bracket_check,
            stiffness_params=("thickness",),
            bulk_params=("width",),
            default_pressure=3.0,
            description="T bracket standing on its stem foot, pressure on the flange top",
            holdout=True,
        ),
        PartCategory(
            "stepped_plate",
            (_P("L1", 40, 100), _P("L2", 40, 100), _P("W", 30, 80), _P("T1", 8, 16), _P("T2", 3, 7)),
            load_face="thin_top",
            fixed_face="clamped_edge",
            blueprint=_stepped_plate,
            check=_stepped_check,
            stiffness_params=("T1", "T2"),
            bulk_params=("W",),
            default_pressure=0.5,
            description="two-step plate clamped at the thick end, pressure on the thin step",
            holdout=True,
        ),
    ]
}


def get_category(category: str | PartCategory) -> PartCategory:
    if isinstance(category, PartCategory):
        return category
    try:
        return CATEGORIES[category]
    except (KeyError, TypeError):
        raise InvalidParams(f"unknown part category {category!r}") from None


def training_categories() -> list[str]:
    return [c.id for c in CATEGORIES.values() if not c.holdout]


def holdout_categories() -> list[str]:
    return [c.id for c in CATEGORIES.values() if c.holdout]


# ---------------------------------------------------------------------------
# Parameter handling
# ---------------------------------------------------------------------------


def resolve_params(category: PartCategory, params) -> list[float]:
    """Turn a list or a name->value map into a schema-ordered list.

    Raises InvalidParams for shape/type problems; values are not bounds-checked.
    """
    names = category.param_names
    if isinstance(params, Mapping):
        if set(params) != set(names):
            raise InvalidParams(f"{category.id} expects parameters {names}, got {sorted(params)}")
        raw = [params[n] for n in names]
    elif isinstance(params, (list, tuple, np.ndarray)):
        raw = list(params)
        if len(raw) != len(names):
            raise InvalidParams(f"{category.id} expects {len(names)} parameters, got {len(raw)}")
    else:
        raise InvalidParams(f"parameters must be a list or a map, got {type(params).__name__}")
    out = []
    for n, v in zip(names, raw):
        if isinstance(v, bool) or not isinstance(v, (int, float, np.integer, np.floating)):
            raise InvalidParams(f"parameter {n} is not a number: {v!r}")
        out.append(float(v))
    return out


def validate_params(category: PartCategory, params) -> list[float]:
    values = resolve_params(category, params)
    for spec, v in zip(category.params, values):
        if not math.isfinite(v):
            raise InvalidParams(f"parameter {spec.name} is not finite")
    problem = category.check(category.as_dict(values))
    if problem:
        raise DegenerateGeometry(f"{category.id}: {problem}")
    for spec, v in zip(category.params, values):
        if not spec.lower <= v <= spec.upper:
            raise InvalidParams(
                f"parameter {spec.name}={v:g} outside [{spec.lower:g}, {spec.upper:g}]"
            )
    return values


# ---------------------------------------------------------------------------
# Meshing
# ---------------------------------------------------------------------------


def _merge_sorted(vals, tol):
    vals = sorted(vals)
    out = [vals[0]]
    for v in vals[1:]:
        if v - out[-1] > tol:
            out.append(v)
    return out


def _graded_axis(breaks, h):
    coords = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = max(1, math.ceil((b - a) / h - 1e-9))
        coords.extend(a + (b - a) * k / n for k in range(1, n + 1))
        coords[-1] = b
    return np.array(coords)


def _mesh_box_union(bp: BoxUnion, resolution: int):
    boxes = np.array(bp.boxes, dtype=float)  # (B, 2, 3)
    lo_all, hi_all = boxes[:, 0].min(axis=0), boxes[:, 1].max(axis=0)
    extent = hi_all - lo_all
    scale = float(extent.max())
    thin = float((boxes[:, 1] - boxes[:, 0]).min())
    h0 = thin / resolution
    tol = 1e-9 * scale
    axes = []
    for ax in range(3):
        breaks = list(boxes[:, 0, ax]) + list(boxes[:, 1, ax])
        for patch in bp.patches:
            if patch.axis != ax:
                breaks += [patch.lo[ax], patch.hi[ax]]
        breaks = [min(max(v, lo_all[ax]), hi_all[ax]) for v in breaks]
        h = max(h0, extent[ax] / (ELEMENT_CAP * resolution))
        axes.append(_graded_axis(_merge_sorted(breaks, tol), h))
    xs, ys, zs = axes
    cx, cy, cz = (0.5 * (a[1:] + a[:-1]) for a in axes)
    CX, CY, CZ = np.meshgrid(cx, cy, cz, indexing="ij")
    centers = np.stack([CX, CY, CZ], axis=-1)
    active = np.zeros(CX.shape, dtype=bool)
    for lo, hi in boxes:
        active |= np.all((centers > lo) & (centers < hi), axis=-1)
    ii, jj, kk = np.nonzero(active)  # lexicographic order
    nx, ny, nz = len(xs), len(ys), len(zs)

    def nid(i, j, k):
        return (i * ny + j) * nz + k

    elems = np.stack(
        [
            nid(ii, jj, kk),
            nid(ii + 1, jj, kk),
            nid(ii + 1, jj + 1, kk),
            nid(ii, jj + 1, kk),
            nid(ii, jj, kk + 1),
            nid(ii + 1, jj, kk + 1),
            nid(ii + 1, jj + 1, kk + 1),
            nid(ii, jj + 1, kk + 1),
        ],
        axis=1,
    )
    used, inverse = np.unique(elems, return_inverse=True)
    elems = inverse.reshape(elems.shape)
    ui, rem = np.divmod(used, ny * nz)
    uj, uk = np.divmod(rem, nz)
    nodes = np.stack([xs[ui], ys[uj], zs[uk]], axis=1)
    return nodes, elems


def _mesh_ring(bp: Ring, resolution: int):
    ri, ro, T = bp.r_in, bp.r_out, bp.thickness
    thin = min(T, ro - ri)
    h0 = thin / resolution
    nr = max(1, math.ceil((ro - ri) / max(h0, (ro - ri) / (ELEMENT_CAP * resolution)) - 1e-9))
    nz = max(1, math.ceil(T / max(h0, T / (ELEMENT_CAP * resolution)) - 1e-9))
    r_mid = 0.5 * (ri + ro)
    nt = math.ceil(2 * math.pi * r_mid / h0)
    nt = min(max(nt, 16), 4 * ELEMENT_CAP * resolution)
    nt = 4 * math.ceil(nt / 4)
    rs = ri + (ro - ri) * np.arange(nr + 1) / nr
    ts = 2 * math.pi * np.arange(nt) / nt
    zs = T * np.arange(nz + 1) / nz
    R, TH, Z = np.meshgrid(rs, ts, zs, indexing="ij")
    nodes = np.stack([R * np.cos(TH), R * np.sin(TH), Z], axis=-1).reshape(-1, 3)
    ii, jj, kk = np.meshgrid(np.arange(nr), np.arange(nt), np.arange(nz), indexing="ij")
    ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
    j1 = (jj + 1) % nt

    def nid(i, j, k):
        return (i * nt + j) * (nz + 1) + k

    elems = np.stack(
        [
            nid(ii, jj, kk),
            nid(ii + 1, jj, kk),
            nid(ii + 1, j1, kk),
            nid(ii, j1, kk),
            nid(ii, jj, kk + 1),
            nid(ii + 1, jj, kk + 1),
            nid(ii + 1, j1, kk + 1),
            nid(ii, j1, kk + 1),
        ],
        axis=1,
    )
    return nodes, elems


def boundary_facets(elements: np.ndarray) -> np.ndarray:
    """Element faces not shared by two elements, with outward orientation."""
    faces = elements[:, HEX_FACES].reshape(-1, 4)
    keys = np.sort(faces, axis=1)
    _, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
    once = np.sort(first[counts == 1])
    if np.any(counts > 2):
        raise DegenerateGeometry("non-manifold mesh: a face is shared by more than two elements")
    return faces[once]


def _quad_normals(pts: np.ndarray):
    """Unit normals and areas of (F, 4, 3) planar quads."""
    n = np.cross(pts[:, 2] - pts[:, 0], pts[:, 3] - pts[:, 1])
    norm = np.linalg.norm(n, axis=1)
    area = 0.5 * norm
    return n / norm[:, None], area


def _label_box_facets(bp: BoxUnion, nodes, facets, scale):
    pts = nodes[facets]
    normals, _ = _quad_normals(pts)
    cent = pts.mean(axis=1)
    axis = np.argmax(np.abs(normals), axis=1)
    sign = np.where(normals[np.arange(len(normals)), axis] > 0, 1, -1)
    coord = cent[np.arange(len(cent)), axis]
    tol = 1e-9 * scale
    labels = np.empty(len(facets), dtype=object)
    for ax in range(3):
        for sg in (-1, 1):
            sel = np.flatnonzero((axis == ax) & (sign == sg))
            if not len(sel):
                continue
            planes = _merge_sorted(coord[sel].tolist(), tol)
            rank = np.searchsorted(np.array(planes) + tol, coord[sel])
            prefix = "xyz"[ax] + ("+" if sg > 0 else "-")
            for f, r in zip(sel, rank):
                key = f"{prefix}{int(r)}"
                labels[f] = bp.names.get(key, key)
    for patch in bp.patches:
        lo = np.array(patch.lo) - tol
        hi = np.array(patch.hi) + tol
        sel = (axis == patch.axis) & (sign == patch.sign) & np.all((cent >= lo) & (cent <= hi), axis=1)
        labels[sel] = patch.label
    return list(labels)


def _label_ring_facets(nodes, facets):
    pts = nodes[facets]
    normals, _ = _quad_normals(pts)
    cent = pts.mean(axis=1)
    labels = []
    for n, c in zip(normals, cent):
        if abs(n[2]) > 0.5:
            labels.append("top" if n[2] > 0 else "bottom")
        else:
            radial = n[0] * c[0] + n[1] * c[1]
            labels.append("outer" if radial > 0 else "inner")
    return labels


def _shape_functions(xi, eta, zeta):
    """Trilinear shape functions and natural derivatives at one point."""
    c = HEX_CORNERS
    N = 0.125 * (1 + c[:, 0] * xi) * (1 + c[:, 1] * eta) * (1 + c[:, 2] * zeta)
    dN = np.empty((3, 8))
    dN[0] = 0.125 * c[:, 0] * (1 + c[:, 1] * eta) * (1 + c[:, 2] * zeta)
    dN[1] = 0.125 * c[:, 1] * (1 + c[:, 0] * xi) * (1 + c[:, 2] * zeta)
    dN[2] = 0.125 * c[:, 2] * (1 + c[:, 0] * xi) * (1 + c[:, 1] * eta)
    return N, dN


def gauss_points_2x2x2():
    g = GAUSS_2
    return [(a, b, c) for a in (-g, g) for b in (-g, g) for c in (-g, g)]


def element_jacobians(nodes: np.ndarray, elements: np.ndarray, point) -> np.ndarray:
    """Jacobian matrices (E, 3, 3) at one natural point; J[e] = dX/dxi."""
    _, dN = _shape_functions(*point)
    X = nodes[elements]  # (E, 8, 3)
    return np.einsum("ai,eaj->eij", dN.T, X).transpose(0, 2, 1)


def mesh_volume(nodes: np.ndarray, elements: np.ndarray) -> float:
    total = np.zeros(len(elements))
    for gp in gauss_points_2x2x2():
        total += np.linalg.det(element_jacobians(nodes, elements, gp))
    return float(total.sum())


def min_corner_jacobian(nodes: np.ndarray, elements: np.ndarray) -> float:
    return float(
        min(np.linalg.det(element_jacobians(nodes, elements, c)).min() for c in HEX_CORNERS)
    )


def _place_anchor(nodes, facets, facet_group, group, diag) -> tuple[float, float, float]:
    """Area centroid of a face group, or the nearest facet centre if the
    centroid falls off the face (annuli, L-shapes)."""
    sel = np.flatnonzero(facet_group == group)
    pts = nodes[facets[sel]]
    _, area = _quad_normals(pts)
    cent = pts.mean(axis=1)
    c = (cent * area[:, None]).sum(axis=0) / area.sum()
    d = point_facet_distances(c, pts)
    if d.min() <= 1e-12 * diag:
        return tuple(float(v) for v in c)
    k = int(np.argmin(np.linalg.norm(cent - c, axis=1)))
    return tuple(float(v) for v in cent[k])


def build_part(category: str | PartCategory, params, resolution: int = 2) -> MeshModel:
    """Generate the hex mesh, face groups and anchors for one design."""
    cat = get_category(category)
    if isinstance(resolution, bool) or not isinstance(resolution, (int, np.integer)) or resolution < 1:
        raise InvalidParams(f"resolution must be a positive integer, got {resolution!r}")
    resolution = int(resolution)
    values = validate_params(cat, params)
    bp = cat.blueprint(cat.as_dict(values))
    if isinstance(bp, Ring):
        nodes, elems = _mesh_ring(bp, resolution)
    else:
        nodes, elems = _mesh_box_union(bp, resolution)
    if min_corner_jacobian(nodes, elems) <= 0:
        raise DegenerateGeometry(f"{cat.id}: inverted element in generated mesh")
    volume = mesh_volume(nodes, elems)
    if not volume > 0:
        raise DegenerateGeometry(f"{cat.id}: non-positive volume")
    diag = float(np.linalg.norm(nodes.max(axis=0) - nodes.min(axis=0)))
    facets = boundary_facets(elems)
    if isinstance(bp, Ring):
        labels = _label_ring_facets(nodes, facets)
    else:
        labels = _label_box_facets(bp, nodes, facets, diag)
    group_labels = sorted(set(labels))
    index = {lbl: j for j, lbl in enumerate(group_labels)}
    facet_group = np.array([index[lbl] for lbl in labels], dtype=np.int64)
    anchors = []
    for role, face in (("load", cat.load_face), ("fixed", cat.fixed_face)):
        if face not in index:
            raise DegenerateGeometry(f"{cat.id}: functional face {face!r} missing from mesh")
        point = _place_anchor(nodes, facets, facet_group, index[face], diag)
        anchors.append(Anchor(role, point, face))
    return MeshModel(
        category=cat.id,
        params=tuple(values),
        resolution=resolution,
        nodes=nodes,
        elements=elems,
        facets=facets,
        facet_group=facet_group,
        group_labels=group_labels,
        anchors=anchors,
        volume_mm3=volume,
        bbox_diag=diag,
    )


# ---------------------------------------------------------------------------
# Face matching
# ---------------------------------------------------------------------------


def _point_triangle_distances(q, a, b, c):
    ab, bc, ca = b - a, c - b, a - c
    n = np.cross(ab, c - a)
    nn = np.einsum("ij,ij->i", n, n)
    w = q - a
    s = np.einsum("ij,ij->i", w, n) / nn
    p = q - s[:, None] * n
    inside = np.ones(len(a), dtype=bool)
    for start, edge in ((a, ab), (b, bc), (c, ca)):
        inside &= np.einsum("ij,ij->i", np.cross(edge, p - start), n) >= 0
    plane = np.abs(s) * np.sqrt(nn)
    seg = np.full(len(a), np.inf)
    for start, edge in ((a, ab), (b, bc), (c, ca)):
        t = np.clip(np.einsum("ij,ij->i", q - start, edge) / np.einsum("ij,ij->i", edge, edge), 0, 1)
        seg = np.minimum(seg, np.linalg.norm(q - (start + t[:, None] * edge), axis=1))
    return np.where(inside, plane, seg)


def point_facet_distances(q, quads: np.ndarray) -> np.ndarray:
    """Euclidean distance from point q to each planar quad in (F, 4, 3)."""
    q = np.asarray(q, dtype=float)
    d1 = _point_triangle_distances(q, quads[:, 0], quads[:, 1], quads[:, 2])
    d2 = _point_triangle_distances(q, quads[:, 0], quads[:, 2], quads[:, 3])
    return np.minimum(d1, d2)


def face_distances(mesh: MeshModel, point) -> np.ndarray:
    """dist(q, F_j) for every face group j."""
    d = point_facet_distances(point, mesh.nodes[mesh.facets])
    out = np.full(len(mesh.group_labels), np.inf)
    np.minimum.at(out, mesh.facet_group, d)
    return out


def match_faces(mesh: MeshModel, anchor_point, eps: float | None = None) -> set[int]:
    """All face groups within ``eps`` of the anchor point."""
    if eps is None:
        eps = mesh.default_eps()
    if not eps > 0:
        raise ValueError("eps must be positive")
    d = face_distances(mesh, anchor_point)
    hit = {int(j) for j in np.flatnonzero(d <= eps)}
    if not hit:
        raise NoFaceMatched(
            f"no face within {eps:g} mm of {tuple(float(v) for v in anchor_point)} "
            f"(closest {float(d.min()):g} mm)"
        )
    return hit


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

MESH_SCHEMA = "cadloop-mesh v1"


def write_mesh(mesh: MeshModel, path: str | Path) -> Path:
    """Plain-text mesh dump.

    Layout: schema line, ``category``, ``params``, then the sections
    ``nodes N`` (id x y z), ``elements E`` (id n0..n7), ``groups G``
    (id label), ``facets F`` (id group n0..n3) and ``anchors A``
    (label face x y z). Ids are zero-based.
    """
    path = Path(path)
    cat = get_category(mesh.category)
    lines = [MESH_SCHEMA, f"category {mesh.category}"]
    lines.append(
        "params " + " ".join(f"{n}={v!r}" for n, v in zip(cat.param_names, mesh.params))
    )
    lines.append(f"nodes {mesh.n_nodes}")
    lines += [f"{i} {x!r} {y!r} {z!r}" for i, (x, y, z) in enumerate(mesh.nodes.tolist())]
    lines.append(f"elements {mesh.n_elements}")
    lines += [f"{i} " + " ".join(map(str, e)) for i, e in enumerate(mesh.elements.tolist())]
    lines.append(f"groups {len(mesh.group_labels)}")
    lines += [f"{j} {lbl}" for j, lbl in enumerate(mesh.group_labels)]
    lines.append(f"facets {len(mesh.facets)}")
    lines += [
        f"{i} {g} " + " ".join(map(str, f))
        for i, (g, f) in enumerate(zip(mesh.facet_group.tolist(), mesh.facets.tolist()))
    ]
    lines.append(f"anchors {len(mesh.anchors)}")
    lines += [f"{a.label} {a.face} {a.point[0]!r} {a.point[1]!r} {a.point[2]!r}" for a in mesh.anchors]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_mesh(path: str | Path) -> MeshModel:
    it = iter(Path(path).read_text(encoding="utf-8").splitlines())
    if next(it) != MESH_SCHEMA:
        raise ValueError("not a cadloop mesh file")
    category = next(it).split()[1]
    params = tuple(float(kv.split("=", 1)[1]) for kv in next(it).split()[1:])

    def section(name):
        head, count = next(it).split()
        if head != name:
            raise ValueError(f"expected section {name!r}, got {head!r}")
        return [next(it).split() for _ in range(int(count))]

    nodes = np.array([[float(v) for v in row[1:]] for row in section("nodes")]).reshape(-1, 3)
    elements = np.array([[int(v) for v in row[1:]] for row in section("elements")]).reshape(-1, 8)
    labels = [row[1] for row in section("groups")]
    frows = section("facets")
    facet_group = np.array([int(r[1]) for r in frows], dtype=np.int64)
    facets = np.array([[int(v) for v in r[2:]] for r in frows]).reshape(-1, 4)
    anchors = [Anchor(r[0], (float(r[2]), float(r[3]), float(r[4])), r[1]) for r in section("anchors")]
    diag = float(np.linalg.norm(nodes.max(axis=0) - nodes.min(axis=0)))
    return MeshModel(
        category=category,
        params=params,
        resolution=0,
        nodes=nodes,
        elements=elements,
        facets=facets,
        facet_group=facet_group,
        group_labels=labels,
        anchors=anchors,
        volume_mm3=mesh_volume(nodes, elements),
        bbox_diag=diag,
    )
