import logging
import sys

from config.settings import settings
from src.controllers.cli import main

logging.basicConfig(
    level=settings.LOG_LEVEL,
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)

if __name__ == "__main__":
    sys.exit(main())
