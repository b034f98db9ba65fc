"""
Configuration file for the EDAC offline RL lab
Desk-scale defaults; every value can be overridden from the environment or a .env file
"""
import os

# Load environment variables from .env file (for local development only)
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    # dotenv not installed - plain environment variables still apply
    pass


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


def _env_float(name: str, default: float) -> float:
    return float(os.getenv(name, repr(default)))


# Logging
LOG_LEVEL = os.getenv("EDAC_LOG_LEVEL", "INFO").upper()

# Filesystem layout
DATA_DIR = os.getenv("EDAC_DATA_DIR", "data")
OUTPUT_DIR = os.getenv("EDAC_OUTPUT_DIR", "runs")

# File format identifiers
DATASET_MAGIC = b"ODRL"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"EDACCKPT"
CHECKPOINT_VERSION = 1

# Training defaults (SAC defaults, 3 hidden layers following the CQL protocol)
GAMMA = _env_float("EDAC_GAMMA", 0.99)
RHO = _env_float("EDAC_RHO", 0.995)           # target smoothing: phi' <- rho*phi' + (1-rho)*phi
LR_Q = _env_float("EDAC_LR_Q", 3e-4)
LR_POLICY = _env_float("EDAC_LR_POLICY", 3e-4)
LR_BETA = _env_float("EDAC_LR_BETA", 3e-4)
BATCH_SIZE = _env_int("EDAC_BATCH_SIZE", 256)
TOTAL_STEPS = _env_int("EDAC_TOTAL_STEPS", 50_000)
CHECKPOINT_EVERY = _env_int("EDAC_CHECKPOINT_EVERY", 5_000)
LOG_EVERY = _env_int("EDAC_LOG_EVERY", 1_000)
HIDDEN_WIDTH = _env_int("EDAC_HIDDEN_WIDTH", 256)
HIDDEN_LAYERS = _env_int("EDAC_HIDDEN_LAYERS", 3)
ENSEMBLE_SIZE = _env_int("EDAC_ENSEMBLE_SIZE", 10)
ES_WEIGHT = _env_float("EDAC_ES_WEIGHT", 1.0)

# Adam (framework defaults)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Policy numerics
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6               # stabilizer in log(1 - tanh(u)^2 + eps)
MAX_PRESQUASH = 15.0          # tanh(15) < 1 in float64, keeps actions strictly inside (-1, 1)
ES_EPS = 1e-12                # gradient-norm stabilizer of the ES metric

# Baseline defaults
CQL_ALPHA = _env_float("EDAC_CQL_ALPHA", 10.0)
CQL_SAMPLES = _env_int("EDAC_CQL_SAMPLES", 10)
VAR_REG_C = _env_float("EDAC_VAR_REG_C", 1.0)

# Dataset generation
DATASET_SIZE = _env_int("EDAC_DATASET_SIZE", 20_000)
MEDIUM_SCORE_BAND = (30.0, 40.0)      # normalized score of the medium checkpoint
MEDIUM_SCORE_FALLBACK = (25.0, 45.0)  # accepted when no snapshot lands in the band
ANCHOR_EPISODES = _env_int("EDAC_ANCHOR_EPISODES", 100)

# Online SAC that produces the behavior policies
REFERENCE_STEPS = _env_int("EDAC_REFERENCE_STEPS", 20_000)
REFERENCE_START_STEPS = _env_int("EDAC_REFERENCE_START_STEPS", 1_000)
REFERENCE_EVAL_EVERY = _env_int("EDAC_REFERENCE_EVAL_EVERY", 500)
REFERENCE_EVAL_EPISODES = _env_int("EDAC_REFERENCE_EVAL_EPISODES", 5)
REFERENCE_HIDDEN_WIDTH = _env_int("EDAC_REFERENCE_HIDDEN_WIDTH", 64)
REFERENCE_BATCH_SIZE = _env_int("EDAC_REFERENCE_BATCH_SIZE", 128)
REFERENCE_CACHE_VERSION = "v1"

# Evaluation and analysis
EVAL_EPISODES = _env_int("EDAC_EVAL_EPISODES", 10)
ANALYSIS_BATCH = _env_int("EDAC_ANALYSIS_BATCH", 1024)
HISTOGRAM_BINS = _env_int("EDAC_HISTOGRAM_BINS", 50)

# Finite-difference oracle
FD_STEP = 1e-5
