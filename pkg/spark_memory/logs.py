"""
Logging setup - everything goes to stderr, stdout is reserved for JSON payloads
"""

import logging
import os
import sys
from typing import Optional

_CONFIGURED = False


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the spark_memory logger tree once per process"""
    global _CONFIGURED
    level_name = (level or os.getenv("SPARK_LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger("spark_memory")
    root.setLevel(getattr(logging, level_name, logging.INFO))
    if _CONFIGURED:
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    _CONFIGURED = True
