# config.py
import logging

# Quantization
KMEANS_ITERS: int = 20
DEFAULT_CODEWORDS: int = 32
DEFAULT_QUANTIZER: str = "product"

# Sampling
DEFAULT_NUM_SAMPLES: int = 20
PROB_SUM_TOL: float = 1e-9

# Statistical harness
CHI2_ALPHA: float = 0.001
CHI2_MIN_EXPECTED: float = 5.0
CHI2_MIN_TOTAL: int = 1000
MIN_FREQUENCY_DRAWS: int = 10_000
BIAS_TRIALS: int = 10_000
MIN_BIAS_TRIALS: int = 100
MC_SLACK_SIGMAS: float = 3.0
MC_CHUNK_TRIALS: int = 2048

# Timing
TIMING_REPEATS: int = 5

# Codebook learning
RECON_WEIGHT: float = 1.0
KL_QUERY_BATCH: int = 32
FINITE_DIFF_STEP: float = 1e-5

# Toy task
TOY_CLASSES: int = 256
TOY_DIM: int = 16
TOY_QUERIES: int = 512
TOY_CLUSTERS: int = 16
TOY_NOISE: float = 0.3
TOY_EPOCHS: int = 30
TOY_LEARNING_RATE: float = 0.02
TOY_CODEWORDS: int = 16
SWEEP_SAMPLE_SIZES: tuple = (5, 10, 50, 100)

# File formats
EMBEDDING_MAGIC: bytes = b"MIDXEMB1"
INDEX_MAGIC: bytes = b"MIDXIDX1"
LABELS_HEADER: tuple = ("query_id", "class_id")

# Exit codes
EXIT_OK: int = 0
EXIT_USAGE: int = 2
EXIT_DATA: int = 3
EXIT_NUMERICAL: int = 4

# Configure logging
logging.basicConfig(
    level=logging.WARNING,
    format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
)
logger = logging.getLogger(__name__)

# Development mode
DEBUG: bool = False
