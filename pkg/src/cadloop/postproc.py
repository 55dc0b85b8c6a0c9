"""Reduction of FEM fields to the scalar feedback triple."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyField
from .materials import Material

MM3_TO_M3 = 1e-9


@dataclass(frozen=True)
class FeedbackTuple:
    u_max: float  # mm
    sigma_max: float  # MPa
    cost: float  # CNY

    def __post_init__(self):
        for name in ("u_max", "sigma_max", "cost"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def to_dict(self) -> dict:
        return {"u_max": self.u_max, "sigma_max": self.sigma_max, "cost": self.cost}

    @classmethod
    def from_dict(cls, d: dict) -> "FeedbackTuple":
        return cls(float(d["u_max"]), float(d["sigma_max"]), float(d["cost"]))


def _field_array(field, attr):
    arr = getattr(field, attr, field)
    arr = np.asarray(arr, dtype=float)
    if arr.size == 0:
        raise EmptyField(f"{attr} is empty")
    return arr


def max_displacement(field) -> float:
    """Largest nodal displacement magnitude; accepts a FemField or an (N, 3) array."""
    u = _field_array(field, "nodal_displacements").reshape(-1, 3)
    return float(np.sqrt((u * u).sum(axis=1)).max())


def von_mises(stress) -> float | np.ndarray:
    """Equivalent stress of (..., 6) tensors ordered xx, yy, zz, xy, yz, zx."""
    s = np.asarray(stress, dtype=float)
    sxx, syy, szz, txy, tyz, tzx = (s[..., i] for i in range(6))
    d_sigma = (sxx - syy) ** 2 + (syy - szz) ** 2 + (szz - sxx) ** 2
    d_tau = txy**2 + tyz**2 + tzx**2
    vm = np.sqrt(0.5 * d_sigma + 3.0 * d_tau)
    return float(vm) if vm.ndim == 0 else vm


def max_von_mises(field) -> float:
    s = _field_array(field, "element_stresses").reshape(-1, 6)
    return float(von_mises(s).max())


def compute_cost(volume_mm3: float, material: Material) -> float:
    """Volume (mm^3) -> mass (kg) -> price (CNY)."""
    if not volume_mm3 >= 0:
        raise ValueError("volume must be non-negative")
    mass = material.rho * (volume_mm3 * MM3_TO_M3)
    return mass * material.price


def compute_mass(volume_mm3: float, material: Material) -> float:
    return material.rho * (volume_mm3 * MM3_TO_M3)


def display_cost(cost: float) -> str:
    return f"¥{cost:.2f}"
