EARTH_RADIUS_KM = 6371.0
# c rounded to 3e5 km/s; 2/3 of it gives the usual 200 km/ms fiber figure
LIGHT_SPEED_KM_PER_MS = 300.0
FIBER_SPEED_FACTOR = 2.0 / 3.0
AREA_TOLERANCE_MS2 = 1e-9

DEMO_EPSILON_MS = 10.0
DEMO_TAU = 0.7
DEMO_ITERATIONS = 8
DEMO_INTERVAL_MS = 300
RELAY_TIMEOUT_MS = 2000
BASELINE_STALENESS_MS = 60_000

BASELINE_PERIOD_S = 6
OFFSET_PERIOD_S = 30 * 60
BASELINE_WINDOW = 10

CALIBRATION_EPSILONS_MS = tuple(float(e) for e in range(31))
CALIBRATION_TAUS = (0.5, 0.6, 0.7, 0.8, 0.9)
CALIBRATION_ITERATIONS = (10, 20, 50, 100)
CALIBRATION_MIN_ROUNDS = 20

PUZZLE_MAX_DIFFICULTY = 40
PUZZLE_NONCE_BYTES = 16
PUZZLE_CAP_EXTRA_BITS = 8

SLV_EPSILON_MS = 5.0
SLV_SAMPLES_PER_LAYER = 3
SLV_MIN_VERIFIERS = 3
PIN_CELL_DEG = 0.5
PIN_SNAPSHOT_EVERY = 100

JITTER_MEAN_MS = 2.0
# forwarding cost of one hop; no sampled delay is shorter
HOP_PROCESSING_MS = 0.01
ASYMMETRY_RANGE = (1.0, 1.3)
CIRCUITOUS_RANGE = (1.0, 1.5)
TRIANGLE_ANGLE_RANGE_DEG = (50.0, 70.0)
TRIANGLE_RADIUS_RANGE_KM = (100.0, 400.0)
INSIDE_MARGIN_FRACTION = 0.1

WIFI_SLOT_US = 20.0
WIFI_GATEWAY_PROP_US = 1.0
WIFI_COMPETING_STATIONS = 4
WIFI_CW_MIN = 32
WIFI_CW_MAX = 1024
WIFI_MAX_RETRIES = 7

REGISTRY_PROBE_PERIOD_S = 10
CLIENT_CONNECT_TIMEOUT_MS = 5000

EXPERIMENT_CLIENT_HASH_RATE = 1000.0
EXPERIMENT_SERVER_IP_BASE = "10.0.0.0"

# published FA/FR percentages, carried into summaries for comparison only
REFERENCE_CPV_BY_N: dict[int, tuple[float, float]] = {600: (1.0, 2.0), 100: (1.1, 2.0), 10: (2.1, 4.1)}
REFERENCE_CPV_WIFI = (2.0, 4.0)
REFERENCE_SLV = (0.0, 2.4)
