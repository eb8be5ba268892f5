import os
from pathlib import Path

from dotenv import load_dotenv

from geoverity.enums import CircleRule, EpsilonMode
from geoverity.services import config as cfg

load_dotenv()


class CpvSettings:
    def __init__(self) -> None:
        self.epsilon_ms = float(os.environ.get("GEOVERITY_EPSILON_MS", cfg.DEMO_EPSILON_MS))
        self.tau = float(os.environ.get("GEOVERITY_TAU", cfg.DEMO_TAU))
        self.iterations = int(os.environ.get("GEOVERITY_ITERATIONS", cfg.DEMO_ITERATIONS))
        self.interval_ms = int(os.environ.get("GEOVERITY_INTERVAL_MS", cfg.DEMO_INTERVAL_MS))
        self.relay_timeout_ms = int(
            os.environ.get("GEOVERITY_RELAY_TIMEOUT_MS", cfg.RELAY_TIMEOUT_MS)
        )
        self.staleness_ms = 1000 * int(
            os.environ.get(
                "GEOVERITY_BASELINE_STALENESS_S", cfg.BASELINE_STALENESS_MS // 1000
            )
        )
        self.epsilon_mode = EpsilonMode(
            os.environ.get("GEOVERITY_EPSILON_MODE", EpsilonMode.PER_SIDE.value)
        )
        self.puzzle_difficulty = int(os.environ.get("GEOVERITY_PUZZLE_DIFFICULTY", 0))


class SyncSettings:
    def __init__(self) -> None:
        self.baseline_period_s = float(
            os.environ.get("GEOVERITY_BASELINE_PERIOD_S", cfg.BASELINE_PERIOD_S)
        )
        self.offset_period_s = float(
            os.environ.get("GEOVERITY_OFFSET_PERIOD_S", cfg.OFFSET_PERIOD_S)
        )
        self.baseline_window = int(
            os.environ.get("GEOVERITY_BASELINE_WINDOW", cfg.BASELINE_WINDOW)
        )
        self.ntp_server = os.environ.get("GEOVERITY_NTP_SERVER", "").strip()


class SlvSettings:
    def __init__(self) -> None:
        self.epsilon_ms = float(os.environ.get("GEOVERITY_SLV_EPSILON_MS", cfg.SLV_EPSILON_MS))
        self.samples_per_layer = int(
            os.environ.get("GEOVERITY_SLV_SAMPLES", cfg.SLV_SAMPLES_PER_LAYER)
        )
        self.pin_cell_deg = float(os.environ.get("GEOVERITY_PIN_CELL_DEG", cfg.PIN_CELL_DEG))
        self.circle_rule = CircleRule(
            os.environ.get("GEOVERITY_CIRCLE_RULE", CircleRule.RIGHT_ANGLE.value)
        )


class Settings:
    log_level: str = os.environ.get("GEOVERITY_LOG_LEVEL", "INFO").upper()
    data_dir: Path = Path(os.environ.get("GEOVERITY_DATA_DIR", "./data"))
    deployment_file: str = os.environ.get("GEOVERITY_DEPLOYMENT", "deployment.json")
    key_file: str = os.environ.get("GEOVERITY_KEY_FILE", "keys.json")
    ip_table_file: str = os.environ.get("GEOVERITY_IP_TABLE", "")
    pin_repair: bool = os.environ.get("GEOVERITY_PIN_REPAIR", "false").lower() == "true"

    cpv: CpvSettings = CpvSettings()
    sync: SyncSettings = SyncSettings()
    slv: SlvSettings = SlvSettings()

    @property
    def results_log_path(self) -> Path:
        return self.data_dir / "results.jsonl"

    @property
    def pin_store_dir(self) -> Path:
        return self.data_dir / "pins"


se = Settings()
