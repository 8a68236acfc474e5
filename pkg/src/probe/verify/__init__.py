"""Independent references and the invariant-suite runner."""

from probe.verify.oracles import (GridDensityComparison, VerificationResult,
                                  closed_form_mle_gaussian, compare_densities,
                                  empirical_conditional)
from probe.verify.suites import SUITES, run_suites

__all__ = ["GridDensityComparison", "SUITES", "VerificationResult", "closed_form_mle_gaussian",
           "compare_densities", "empirical_conditional", "run_suites"]
