"""Slutsky symmetry laboratory.

Synthetic heterogeneous demand systems, a population oracle for their
conditional quantiles, kernel estimators of the same objects, the
quantile-based symmetry residual, and a bootstrap test harness.
"""

from __future__ import annotations

from .config import RunConfig, load_config
from .dgp import (Asym3, CobbDouglas3, ContextPoint, DemandSystem, Design, SimulatedDataset,
                  control_residuals, demand_derivatives, eval_demand, make_system,
                  read_dataset, sample_heterogeneity, simulate_cross_section,
                  slutsky_asymmetry, slutsky_matrix, write_dataset)
from .engine import (CorrectionTerms, QuantileIndices, SymmetryResidual, correction_C,
                     correction_D, correction_terms, hicksian_gap_report, lemma1_rhs,
                     quantile_indices, symmetry_sides)
from .errors import (SslabError, DomainError, ArgumentError, StateError, EstimationError,
                     DegeneracyError, SparseRegionError, ExtrapolationError, BracketError,
                     ProviderInconsistencyError, UnsupportedChannelError, EmptyGridError,
                     UnreliableBootstrapError, ConfigError, ReportParseError)
from .estimators import (BandwidthProfile, CurveOnGrid, KernelQuantileProvider,
                         estimate_conditional_cdf, estimate_conditional_density,
                         estimate_partial, invert_cdf, monotone_rearrange, select_bandwidths)
from .harness import (GridDesign, TestReport, bootstrap_pvalue, build_grid,
                      evaluate_residual_field, lemma_check, monte_carlo_study, read_report,
                      run_oracle_check, run_symmetry_test, test_statistic, write_report,
                      write_residual_field, write_study_table)
from .numdiff import FdScheme, fd_partial
from .oracle import ALL_CHANNELS, ChannelMode, OracleSettings, PopulationOracle

__version__ = "0.1.0"
