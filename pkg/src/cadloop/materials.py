"""Material library and per-material allowable stress."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

from .errors import UnknownMaterial


@dataclass(frozen=True)
class Material:
    """Isotropic linear-elastic material with a price and a stress limit.

    Units follow the N-mm-MPa system used by the solver, except density
    (kg/m^3) and price (CNY/kg), which only enter the cost chain.
    """

    name: str
    E: float
    nu: float
    rho: float
    price: float
    sigma_allow: float

    def __post_init__(self):
        if not self.name or self.name != self.name.strip():
            raise ValueError(f"material name must be non-empty and trimmed: {self.name!r}")
        vals = (self.E, self.nu, self.rho, self.price, self.sigma_allow)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite property in material {self.name!r}")
        if self.E <= 0:
            raise ValueError(f"{self.name}: E must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError(f"{self.name}: nu must lie in [0, 0.5)")
        if self.rho <= 0:
            raise ValueError(f"{self.name}: rho must be positive")
        if self.price < 0:
            raise ValueError(f"{self.name}: price must be non-negative")
        if self.sigma_allow <= 0:
            raise ValueError(f"{self.name}: sigma_allow must be positive")

    @property
    def cost_per_m3(self) -> float:
        return self.rho * self.price

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "E": self.E,
            "nu": self.nu,
            "rho": self.rho,
            "price": self.price,
            "sigma_allow": self.sigma_allow,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Material":
        return cls(
            name=str(d["name"]),
            E=float(d["E"]),
            nu=float(d["nu"]),
            rho=float(d["rho"]),
            price=float(d["price"]),
            sigma_allow=float(d["sigma_allow"]),
        )


class MaterialLibrary:
    """Ordered, immutable collection of materials with unique names."""

    def __init__(self, materials: Iterable[Material]):
        self._materials = tuple(materials)
        self._by_name = {}
        for m in self._materials:
            if m.name in self._by_name:
                raise ValueError(f"duplicate material name {m.name!r}")
            self._by_name[m.name] = m

    @property
    def materials(self) -> tuple[Material, ...]:
        return self._materials

    @property
    def names(self) -> list[str]:
        return [m.name for m in self._materials]

    def __iter__(self) -> Iterator[Material]:
        return iter(self._materials)

    def __len__(self) -> int:
        return len(self._materials)

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and name.strip() in self._by_name

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MaterialLibrary) and self._materials == other._materials

    def __hash__(self) -> int:
        return hash(self._materials)

    def __repr__(self) -> str:
        return f"MaterialLibrary({self.names!r})"

    def lookup(self, name: str) -> Material:
        return lookup_material(self, name)

    def by_strength(self) -> list[Material]:
        """Materials sorted by ascending allowable stress (stable)."""
        return sorted(self._materials, key=lambda m: m.sigma_allow)

    def by_volume_cost(self) -> list[Material]:
        """Materials sorted by ascending cost per unit volume (stable)."""
        return sorted(self._materials, key=lambda m: m.cost_per_m3)

    def to_list(self) -> list[dict]:
        return [m.to_dict() for m in self._materials]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "MaterialLibrary":
        return cls(Material.from_dict(d) for d in items)


def lookup_material(library: MaterialLibrary, name: str) -> Material:
    """Exact name lookup after trimming surrounding whitespace."""
    if not isinstance(name, str):
        raise UnknownMaterial(f"material name must be a string, got {type(name).__name__}")
    key = name.strip()
    try:
        return library._by_name[key]
    except KeyError:
        raise UnknownMaterial(f"unknown material {key!r}") from None


def allowable_stress(material: Material) -> float:
    """Stress limit used in feasibility checks; it is the library value."""
    return material.sigma_allow


def parse_material_file(text: str) -> MaterialLibrary:
    """Parse ``name|E|nu|rho|price|sigma_allow`` records; ``#`` starts a comment."""
    materials = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split("|")]
        if len(fields) != 6:
            raise ValueError(f"line {lineno}: expected 6 fields, got {len(fields)}")
        name, *nums = fields
        try:
            E, nu, rho, price, sigma = (float(x) for x in nums)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        materials.append(Material(name, E, nu, rho, price, sigma))
    return MaterialLibrary(materials)


def load_library(path: str | Path | None = None) -> MaterialLibrary:
    if path is None:
        return default_library()
    return parse_material_file(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_library() -> MaterialLibrary:
    text = resources.files("cadloop").joinpath("data/materials.txt").read_text(encoding="utf-8")
    return parse_material_file(text)
