"""
This file contains the constants for the ifno application.
"""
# Tensor file format
TENSOR_MAGIC = b"IFNOTNSR"
TENSOR_VERSION = 0x01
DTYPE_REAL32 = 0x01
DTYPE_REAL64 = 0x02
TENSOR_SUFFIX = ".tnsr"

# Checkpoint and dataset layout
MANIFEST_FILE = "manifest.txt"
META_FILE = "meta.txt"
DATASET_MANIFEST = "dataset.txt"
STATS_DIR = "stats"
CONFIG_ECHO_FILE = "config.txt"
LOSS_HISTORY_FILE = "losses.csv"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.txt"
BASELINE_FILE = "baseline.txt"
ABLATION_FILE = "ablation.csv"
CHECKPOINT_DIR = "checkpoints"
STAGE_CHECKPOINTS = ("stage1", "stage2", "final")

LOSS_HISTORY_HEADER = "epoch,stage,j_fwd,j_inv,j_pq,j_p2q,j_kl,j_rec,total"
METRICS_HEADER = "sample,rel_l2_fwd,rel_l2_inv"

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_DIVERGENCE = 4

# Numerical constants
SOFTPLUS_FLOOR = 1e-6
SOFTPLUS_LINEAR_CUTOFF = 30.0
PERMEABILITY_FLOOR = 0.05
DIVERGENCE_LIMIT = 1e6
GRADCHECK_FLOOR = 1e-8

# ERROR_CONTENT
CONFIG_ERROR_TITLE = "Invalid configuration"
STORAGE_ERROR_TITLE = "Storage error"
FINGERPRINT_ERROR_TITLE = "Checkpoint mismatch"
SOLVER_ERROR_TITLE = "Solver failure"
DIVERGENCE_ERROR_TITLE = "Training diverged"
SHAPE_ERROR_TITLE = "Shape mismatch"
AUTODIFF_ERROR_TITLE = "Autodiff error"
