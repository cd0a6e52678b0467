# -*- coding: utf-8 -*-
import logging
import os
import sys
from typing import Optional

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s [%(threadName)s] %(message)s"


def setup_logging(level: Optional[str] = None) -> None:
    """
    Configure stdout logging for the simulator.
    Level comes from the argument, then LOG_LEVEL env, then INFO.
    """
    level_name = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )
    # asyncio logs every executor hop at DEBUG
    logging.getLogger("asyncio").setLevel(logging.WARNING)
