# Default settings. Command line flags and pipeline config files override these values.

# Simplification
TARGET_VERTEX_COUNT = 16000
K_NEG = 10.0
K_POS = 1.0
REFRESH_FRACTION = 0.1  # curvature refresh interval as a fraction of the initial vertex count

# Boundary detection and density
BOUNDARY_K = 8
DENSITY_M = 4

# Rendering
N_LAT = 6
N_LON = 16
VIEW_PRESETS = {32: (4, 8), 96: (6, 16), 128: (8, 16)}
FOV_DEGREES = 40.0
RESOLUTION = 1024
RIG_RADIUS = 2.0  # multiple of the bbox diagonal
LIGHT_INTENSITY = 2.0
DEPTH_EPSILON_FRACTION = 1e-3  # of the rendered depth range
FOOTPRINT_SLACK = 2.0  # pixels

# Losses
CBL_RADIUS_FRACTION = 0.05  # of the bbox diagonal
LOG_CLAMP = 1e-12

# Augmentation
TRANSLATION_RANGE = 0.1
ROTATION_SIGMA = 1.0

THREADS = 1
