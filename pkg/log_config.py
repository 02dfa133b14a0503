import os
import logging

is_debug = bool(os.getenv("DEBUG", False))

logging.basicConfig(level=logging.DEBUG if is_debug else logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger("homog-drift")

logging.getLogger("httpx").setLevel(logging.CRITICAL)
logging.getLogger("httpcore").setLevel(logging.CRITICAL)
