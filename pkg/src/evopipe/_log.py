import logging

logger = logging.getLogger("evopipe")
