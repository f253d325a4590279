"""
Spark - shared experiential memory for coding agents
Documentation retrieval plus lessons curated from agent feedback, served over MCP
"""

__version__ = "1.0.0"
__author__ = "Spark Team"

from .errors import SparkError
from .config import SparkConfig, load_config
from .store import SparkStore
from .gateway import Gateway
from .service import SparkService

__all__ = [
    'SparkError',
    'SparkConfig',
    'load_config',
    'SparkStore',
    'Gateway',
    'SparkService',
]
