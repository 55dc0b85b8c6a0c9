"""The full build -> solve -> extract -> cost chain as one call.

Used wherever a design must be evaluated outside an episode: ground-truth
generation, the feasibility oracle, final-design reproduction and the
re-verification scorer.
"""

from __future__ import annotations

from dataclasses import dataclass

from .fem import FemField, SimSetting, solve_linear_static
from .geometry import MeshModel, build_part
from .materials import Material, MaterialLibrary, lookup_material
from .postproc import FeedbackTuple, compute_cost, max_displacement, max_von_mises


@dataclass
class ChainResult:
    mesh: MeshModel
    field: FemField
    feedback: FeedbackTuple


class Toolchain:
    """Deterministic CAD-CAE chain without failure injection.

    ``calls`` counts evaluations so callers can enforce or assert budgets.
    """

    def __init__(self):
        self.calls = 0

    def run(
        self,
        category: str,
        params,
        material: str | Material,
        setting: SimSetting,
        library: MaterialLibrary | None = None,
        eps: float | None = None,
    ) -> ChainResult:
        self.calls += 1
        if not isinstance(material, Material):
            if library is None:
                raise TypeError("a material name needs a library")
            material = lookup_material(library, material)
        mesh = build_part(category, params, setting.mesh_resolution)
        fld = solve_linear_static(mesh, material, setting, eps)
        fb = FeedbackTuple(
            u_max=max_displacement(fld),
            sigma_max=max_von_mises(fld),
            cost=compute_cost(mesh.volume_mm3, material),
        )
        return ChainResult(mesh, fld, fb)

    def evaluate(self, category, params, material, setting, library=None, eps=None) -> FeedbackTuple:
        return self.run(category, params, material, setting, library, eps).feedback
