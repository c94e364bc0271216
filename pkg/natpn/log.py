import logging, os

from termcolor import colored


COLORS = {
    'DEBUG': 'grey',
    'INFO': 'white',
    'WARNING': 'yellow',
    'ERROR': 'red',
    'CRITICAL': 'red'}


def _env_level() -> int:
    name = os.environ.get('LOG_LEVEL', 'WARNING').upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.WARNING


_base_factory = logging.getLogRecordFactory()
def record_factory(*args, **kwargs):
    record = _base_factory(*args, **kwargs)
    record.levelname_colored = colored(record.levelname, COLORS.get(record.levelname, 'white'))
    return record


logging.setLogRecordFactory(record_factory)
logging.basicConfig(level=_env_level(), format="%(levelname_colored)s: %(name)s: %(message)s")
log = logging.getLogger('natpn')


def set_verbosity(verbose: int) -> None:
    """Lower the package log threshold for ``-v`` (INFO) or ``-vv`` (DEBUG); never raises it above ``LOG_LEVEL``."""
    if verbose <= 0:
        return
    level = logging.INFO if verbose == 1 else logging.DEBUG
    log.setLevel(min(level, logging.getLogger().getEffectiveLevel()))
