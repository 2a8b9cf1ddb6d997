"""Scalar-on-image regression in the wavelet domain.

Sparse estimators are fitted to wavelet coefficients of image
predictors and tuned by cross-validation. Permutation tests assess the
image effect, and a separate report looks for confounding by the
scalar covariates.
"""

__version__ = "0.1.0"

from .dwt import ImageStack, Layout, WaveletSpec, dwt, dwt_stack, idwt, idwt_rows  # noqa: E402
from .glm import Family, GlmFit, deviance, fit_glm, predict  # noqa: E402
from .estimators import (  # noqa: E402
    Dataset,
    EstimatorConfig,
    ScalarOnImageFit,
    fit,
    fit_net,
    fit_pcr,
    fit_pls,
)
from .modelsel import CVConfig, CVResult, GridSpec, cv_score, tune  # noqa: E402
from .inference import (  # noqa: E402
    ConfounderReport,
    PermTestResult,
    PermutationScheme,
    confounder_diagnostics,
    perm_test,
    pseudo_predictor_design,
)

__all__ = [
    "CVConfig", "CVResult", "ConfounderReport", "Dataset", "EstimatorConfig", "Family",
    "GlmFit", "GridSpec", "ImageStack", "Layout", "PermTestResult", "PermutationScheme",
    "ScalarOnImageFit", "WaveletSpec", "confounder_diagnostics", "cv_score", "deviance",
    "dwt", "dwt_stack", "fit", "fit_glm", "fit_net", "fit_pcr", "fit_pls", "idwt",
    "idwt_rows", "perm_test", "predict", "pseudo_predictor_design", "tune",
]
