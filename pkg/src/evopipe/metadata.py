"""Shared constants for artifacts, result files and reports."""

import os

EXPORT_HEADER = "evopipe-export v1"
RESULT_FORMAT = "evopipe-result v1"
GRID_MANIFEST_FORMAT = "evopipe-grid v1"

FLAT_TABLE_HEADER = (
    "dataset",
    "family",
    "replicate",
    "seed",
    "cv_accuracy",
    "test_accuracy",
    "duration_s",
    "complexity",
)

FAMILY_NN = "NN"
FAMILY_TPOT = "TPOT"
FAMILY_TPOT_NN = "TPOT-NN"
FAMILY_SHALLOW = "Shallow"
FAMILIES = (FAMILY_SHALLOW, FAMILY_TPOT, FAMILY_NN, FAMILY_TPOT_NN)

PMLB_DEFAULT_URL = "https://github.com/EpistasisLab/pmlb/raw/master/datasets"
PMLB_BASE_URL = os.environ.get("EVOPIPE_PMLB_URL", PMLB_DEFAULT_URL)
PMLB_TARGET_COLUMN = "target"

BUNDLED_BREAST_CANCER = "breast-cancer-bundled"
HILL_VALLEY = "hill-valley"
HILL_VALLEY_NOISY = "hill-valley-noisy"
