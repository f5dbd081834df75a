from .forcing import SpikeForcing
from .fractional import (TemperedFracParams, UnsupportedOrderError, graded_mesh, lif_mesh,
                         solve_tempered_lif, tempered_caputo_l1)
from .izhikevich import BlowUpError, IzhikevichParams, equilibrium, solve_izhikevich
from .riemann import (ConvergenceError, RiemannSetup, RiemannState, VacuumError, riemann_exact,
                      star_state, total_mass, wave_structure, waves_inside)

__all__ = [
    "SpikeForcing", "TemperedFracParams", "UnsupportedOrderError", "graded_mesh", "lif_mesh",
    "solve_tempered_lif", "tempered_caputo_l1", "BlowUpError", "IzhikevichParams", "equilibrium",
    "solve_izhikevich", "ConvergenceError", "RiemannSetup", "RiemannState", "VacuumError",
    "riemann_exact", "star_state", "total_mass", "wave_structure", "waves_inside",
]
