import logging

from config.config import LOG_FILE, LOG_LEVEL

# Silence library chatter below WARNING
logging.getLogger("concurrent.futures").setLevel(logging.WARNING)
logging.getLogger("numexpr").setLevel(logging.WARNING)

logging.basicConfig(
    filename=LOG_FILE,
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s - %(levelname)s - %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S"
)

def log_debug(message):
    logging.debug(message)

def log_info(message):
    logging.info(message)

def log_warning(message):
    logging.warning(message)

def log_error(message):
    logging.error(message)
