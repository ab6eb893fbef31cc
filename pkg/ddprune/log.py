# ddprune/log.py
import logging, os

FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup(level: str | None = None) -> None:
    """Configure root logging for a command run; LOG_LEVEL env wins over the INFO default."""
    lvl = (level or os.getenv("LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=lvl, format=FORMAT, force=True)
    # torch/numexpr emit thread-pool chatter below WARNING
    logging.getLogger("torch").setLevel(logging.WARNING)
