"""
Blockchain proof-of-work multi-chaînes à tickets : bibliothèque, simulateur et analyses
"""
import logging
import sys

__version__ = '1.0.0'


def configure_logging(level: str = None):
    """
    Installe un handler stderr pour toute l'application

    Args:
        level: Niveau de log (par défaut config.LOG_LEVEL)
    """
    if level is None:
        import config
        level = config.LOG_LEVEL

    root = logging.getLogger('app')
    root.setLevel(level)

    # Éviter les handlers en double si la CLI est appelée plusieurs fois (tests)
    for handler in list(root.handlers):
        if getattr(handler, '_multistrand', False):
            root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter('%(message)s'))
    handler._multistrand = True
    root.addHandler(handler)
    return root
