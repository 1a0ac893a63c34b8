"""Self-avoiding curve network optimization.

Minimizes the discrete tangent-point energy of curve networks under hard
constraints, preconditioned by a fractional Sobolev inner product, with
optional Barnes-Hut, hierarchical-matrix, and multigrid acceleration.
"""

from .bct import BlockClusterTree, HierKernelMatrix, HierMetric, KernelSpec, build_bct
from .bvh import EdgeBvh, bh_differential, bh_energy, build_bvh
from .constraints import (Barycenter, ConstraintSet, EdgeLengths,
                          PointConstraint, SphereSurface, SurfaceConstraint,
                          TangentConstraint, TotalLength, project_gradient,
                          project_onto_constraints)
from .energy import (EnergyParams, ParameterError, SelfContactError,
                     discrete_differential, discrete_energy, kernel,
                     validate_params)
from .flow import (FlowConfig, FlowResult, StepReport, collision_step_limit,
                   descent_direction, line_search, run_flow)
from .metric import (MetricOperator, assemble_high_order, assemble_low_order,
                     assemble_metric, sobolev_gradient_dense)
from .multigrid import (MgConfig, MultigridHierarchy, coarsen_network,
                        projected_saddle_solve)
from .network import (CurveNetwork, EdgeGeometry, InvalidNetworkError,
                      build_network, edge_average, edge_geometry)
from .potentials import (ConstantField, FieldPotential,
                         LengthDifferencePotential, RotationField,
                         SurfacePotential, TotalLengthPotential)
from .scenes import (Scene, SceneError, export_frames, generate_test_curve,
                     load_obj_curve, parse_scene, save_obj_curve,
                     serialize_scene)

__version__ = "0.1.0"
