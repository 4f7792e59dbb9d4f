"""
The base logger being used throughout this project.
"""

import logging
from pathlib import Path

import yaml

with open(Path(__file__).with_name("config.yaml"), "r") as stream:
    _log_level = yaml.safe_load(stream).get("log_level", "INFO")

logging.basicConfig(
    level=_log_level,
    datefmt="%d.%m.%y %H:%M:%S",
    format="%(asctime)s | %(levelname)s | %(message)s",
    force=True
)

logger = logging.getLogger("rgbd_mae")
