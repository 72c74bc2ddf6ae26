# Configure logging format
import logging
import os

# stdout is reserved for eval/decode results, logs go to stderr
logging.basicConfig(format="%(asctime)s [%(levelname)s] %(message)s",
                    handlers=[logging.StreamHandler()],
                    datefmt='%H:%M:%S')

logger = logging.getLogger('mtl')
# DEBUG prints per-batch lines, MTL_LOG_LEVEL=INFO keeps only epoch summaries
logger.setLevel(os.environ.get("MTL_LOG_LEVEL", "DEBUG").upper())
