
# Container format
DATASET_FORMAT_TAG = "ptycho-ad-dataset"
DATASET_FORMAT_VERSION = 1
SNAPSHOT_FORMAT_VERSION = 2

# Padding: padded side length is never larger than this multiple of the field
MAX_PAD_FACTOR = 4

# Per-group Adam learning rates. The distance is optimized as a relative scale
# factor z = z0 * (1 + u), so its rate is in units of z0.
DEFAULT_LR_OBJECT = 1e-1
DEFAULT_LR_PROBE = 1e-1
DEFAULT_LR_DISTANCE = 1e-2
DEFAULT_LR_POSITIONS = 1e-2

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Regularizer weights
DEFAULT_WEIGHT_OBJECT = 1e2
DEFAULT_WEIGHT_PROBE = 1e2
DEFAULT_WEIGHT_POSITIONS = 1e-3

DEFAULT_BATCH_SIZE = 5
DEFAULT_CHECKPOINT_INTERVAL = 50

# Energy fraction shared by the extra probe modes at initialization
EXTRA_MODE_ENERGY_FRACTION = 0.1

# SSIM (Gaussian window sigma 1.5, truncated to 11x11)
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Abbe criterion prefactor for coherent illumination
ABBE_COHERENT_FACTOR = 0.82

POSITION_HISTOGRAM_BINS = 20

LOG_LEVEL_ENV = "PTYCHO_AD_LOG_LEVEL"
