from __future__ import annotations

import logging

from geoverity.cli.main import main
from geoverity.settings import se

logging.basicConfig(
    level=se.log_level,
    format="%(asctime)s | %(levelname)-8s | %(name)s: %(message)s",
)

if __name__ == "__main__":
    raise SystemExit(main())
