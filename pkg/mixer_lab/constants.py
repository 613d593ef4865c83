"""
Constants and record types used across the MixER laboratory.

Includes:
- Modality codes and gallery protocol names
- Default hyperparameters for the desk-scale benchmark
- Fixed output file names
- Namedtuples for samples, embeddings, history rows and reports
"""

from collections import namedtuple

MODALITIES = ("V", "I")
MODALITY_INDEX = {"V": 0, "I": 1}

GALLERY_KINDS = ("Mix", "MixCam", "MixCamID", "MixID", "CrossModal", "UniModal")
EMBED_MODES = ("fused_rule", "erased_only", "related_only")
SHOT_MODES = ("all", "single_shot")
ORTH_FORMS = ("squared", "raw")

RANKS = (1, 5, 10, 20)

# Guards every norm division in the autodiff engine
NORM_EPS = 1e-12

# Default weights for lambda_m, lambda_o, lambda_f
DEFAULT_LAMBDA_M = 0.4
DEFAULT_LAMBDA_O = 0.6
DEFAULT_LAMBDA_F = 0.4
DEFAULT_MARGIN_ALPHA = 0.3
DEFAULT_CC_MARGIN_RHO = 0.5

HIST_BINS = 64
HIST_RANGE = (0.0, 2.0)

PROBE_STEPS = 200
PROBE_LR = 0.1
PROBE_TRAIN_FRACTION = 0.7
PROBE_BINS = 8

# Above this the nearest-centroid oracle is no longer a meaningful learnability check
ORACLE_NOISE_LIMIT = 1.0

CHECKPOINT_MAGIC = b"MIXER1"

DATASET_FILE = "dataset.csv"
DATASET_META_FILE = "dataset.json"
HISTORY_FILE = "history.csv"
CHECKPOINT_FILE = "model.ckpt"
REPORT_FILE = "report.csv"
HIST_FILE = "dist_hist.csv"
VERIFY_FILE = "verify.csv"
SWEEP_REPORT_FILE = "sweep_report.csv"
PROBE_FILE = "probe.csv"
SWEEP_DIR = "sweep"

HISTORY_COLUMNS = ["epoch", "lr", "l_yme", "l_ymr", "l_m", "l_o", "l_f", "total"]
REPORT_COLUMNS = [
    "setting", "embed_mode", "query_modality",
    "R1", "R5", "R10", "R20", "mAP", "mINP", "used", "skipped",
]
HIST_COLUMNS = ["bin_lo", "bin_hi", "intra_count", "inter_count"]
VERIFY_COLUMNS = ["check", "trials", "max_violation", "pass"]
PROBE_COLUMNS = ["probe_target", "feature_source", "accuracy", "chance_level"]

# Loss-ablation presets: LossWeights overrides applied on top of the defaults
ABLATION_PRESETS = {
    "yme": {"ymr_enabled": False, "lambda_m": 0.0, "lambda_o": 0.0, "lambda_f": 0.0},
    "yme_ymr": {"lambda_m": 0.0, "lambda_o": 0.0, "lambda_f": 0.0},
    "yme_ymr_orth": {"lambda_m": 0.0, "lambda_f": 0.0},
    "yme_ymr_m": {"lambda_o": 0.0, "lambda_f": 0.0},
    "yme_ymr_orth_m": {"lambda_f": 0.0},
    "full": {},
}

# Data structures for in memory processing
Sample = namedtuple("Sample", ["features", "id", "modality", "camera", "split"])
EmbeddingRecord = namedtuple("EmbeddingRecord", ["z_e", "z_r", "z_f", "id", "modality", "camera"])
LossBreakdown = namedtuple("LossBreakdown", ["l_yme", "l_ymr", "l_m", "l_o", "l_f", "total"])
HistoryRow = namedtuple("HistoryRow", HISTORY_COLUMNS)
OracleReport = namedtuple("OracleReport", ["accuracy", "accuracy_by_modality", "num_test"])
EvalReport = namedtuple("EvalReport", ["rank_k", "mAP", "mINP", "num_queries_used", "num_queries_skipped"])
DistanceDistribution = namedtuple(
    "DistanceDistribution",
    ["intra_mean", "intra_var", "inter_mean", "inter_var", "bin_edges", "intra_counts", "inter_counts"],
)
ProbeReport = namedtuple("ProbeReport", ["probe_target", "feature_source", "accuracy", "chance_level"])
CheckReport = namedtuple("CheckReport", ["check", "trials", "max_violation", "passed"])
