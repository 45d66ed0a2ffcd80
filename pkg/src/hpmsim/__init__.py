"""Classical solver and bound-verification suite for quadratic dissipative
ODEs du/dt = F1 u + F2 (u kron u) via homotopy-perturbation linear embedding
and Taylor time marching."""

from .cascade import HpmCascade, catalan, solve_cascade, truncated_solution, truncation_bound
from .embedding import (
    EmbeddedSystem,
    EmbeddingIndexMap,
    assemble_A,
    assemble_y_in,
    build_index_map,
    enumerate_level,
    row_pattern_Bm,
    structural_report,
)
from .errors import BoundViolation, HpmsimError, NumericalError, ValidationError
from .marching import (
    MarchingSolution,
    TaylorSystemParams,
    assemble_C,
    choose_order,
    condition_report,
    select_parameters,
    solve_marching,
    taylor_polynomial_apply,
)
from .measurement import MeasurementReport, final_error, normalized_perturbation_bounds, postselect
from .ode import (
    NonlinearityParams,
    QuadraticODE,
    bernoulli_closed_form,
    compute_K,
    make_ode,
    reference_solution,
    rescale,
)
from .pipeline import RunConfig, RunReport, generate_instance, instance_config, run, sweep
from .sparse import (
    SparseMatrix,
    dense_condition_number,
    dense_eigs,
    dense_expm,
    read_triplets,
    spectral_norm,
    spmv,
    write_triplets,
)

__version__ = "0.1.0"
