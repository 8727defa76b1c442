import os
import logging
from logging.handlers import RotatingFileHandler

# Load environment variables from .env file (local runs); real env vars win.
try:
    from dotenv import load_dotenv
    load_dotenv(override=False)
except ImportError:
    pass

basedir = os.path.abspath(os.path.dirname(__file__))

# ------------------ Runtime Configuration ------------------
LOG_TO_FILE = os.environ.get('LOG_TO_FILE', '0') == '1'
LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
LOG_DIR = os.environ.get('LOG_DIR', os.path.join(basedir, 'logs'))


def worker_count():
    """Scenario-level worker pool size (MCKV_WORKERS, default 1)."""
    raw = os.environ.get('MCKV_WORKERS', '1')
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def find_catalog_url(output_dir=None):
    # Look for a catalog URL in the commonly used variable names, then fall back
    # to a SQLite file next to the run artifacts.
    candidates = [
        'MCKV_CATALOG_URL',
        'DATABASE_URL',
        'SQLALCHEMY_DATABASE_URI',
    ]
    for key in candidates:
        val = os.environ.get(key)
        if val and val.strip():
            if val.startswith('postgres://'):
                val = val.replace('postgres://', 'postgresql://', 1)
            return val
    target = output_dir or basedir
    return 'sqlite:///' + os.path.join(os.path.abspath(target), 'catalog.db')


# ------------------ Logging Configuration ------------------
logger = logging.getLogger('mckvlab')
logger.setLevel(getattr(logging, LOG_LEVEL.upper(), logging.INFO))
formatter = logging.Formatter('%(asctime)s %(levelname)s %(message)s')
if not logger.handlers:
    if LOG_TO_FILE:
        os.makedirs(LOG_DIR, exist_ok=True)
        fh = RotatingFileHandler(os.path.join(LOG_DIR, 'lab.log'), maxBytes=5*1024*1024, backupCount=5)
        fh.setLevel(getattr(logging, LOG_LEVEL.upper(), logging.INFO))
        fh.setFormatter(formatter)
        logger.addHandler(fh)
    else:
        ch = logging.StreamHandler()
        ch.setLevel(getattr(logging, LOG_LEVEL.upper(), logging.INFO))
        ch.setFormatter(formatter)
        logger.addHandler(ch)
