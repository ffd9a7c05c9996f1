import logging
import sys

from config import Config
from src.cli import SUBCOMMANDS, EXIT_USAGE, run

# Configure logging to show messages at the configured level
logging.basicConfig(
    level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    handlers=[
        logging.StreamHandler()  # Output to console
    ]
)

if __name__ == "__main__":
    if len(sys.argv) < 2:
        print(f"usage: python main.py {{{','.join(SUBCOMMANDS)}}} [options]")
        sys.exit(EXIT_USAGE)
    sys.exit(run(sys.argv[1], sys.argv[2:]))
