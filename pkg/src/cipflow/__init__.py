"""CIP-stabilized P1 finite elements for transient convection-diffusion
with multiscale advection, differential filtering and filtered-error
estimation."""

from .mesh import (Mesh, generate_unit_square_mesh, generate_polygonal_disc_mesh,
                   read_mesh, write_mesh, mesh_statistics, refine_uniform)
from .fem import (FeSpace, FeFunction, assemble_mass, assemble_stiffness,
                  assemble_convection, assemble_cip, l2_project,
                  project_velocity_pw_constant, compute_norms,
                  estimate_inverse_constants)
from .velocity import (VelocityField, rigid_rotation, shear, oscillatory_fine,
                       composite, multiscale_square, evaluate_decomposed,
                       check_assumptions, compute_peclet, compute_tau_F,
                       compute_sigma_p_lambda)
from .solver import (ProblemSetup, LinearSolverConfig, TrajectoryRecord,
                     solve_linear, run_forward, run_dual, stability_report)
from .filtering import (FilterConfig, ErrorReport, helmholtz_filter,
                        filtered_norm, a_posteriori_estimate,
                        measure_filtered_error, effectivity,
                        error_representation_check)

__version__ = "0.1.0"
