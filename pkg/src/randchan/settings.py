import os
from dataclasses import dataclass
from functools import cache

from randchan.errors import InvalidInput

DEFAULT_CAP = 10_000_000
DEFAULT_WORKERS = 1
DEFAULT_DIGITS = 9

CAP_ENV = "RANDCHAN_CAP"
WORKERS_ENV = "RANDCHAN_WORKERS"
DIGITS_ENV = "RANDCHAN_DIGITS"


@dataclass(frozen=True)
class Settings:
    """Defaults that can be overridden from the environment."""

    enumeration_cap: int = DEFAULT_CAP
    workers: int = DEFAULT_WORKERS
    digits: int = DEFAULT_DIGITS


def get_env_int(key: str, default: int, minimum: int = 1) -> int:
    """
    Read a positive integer from the environment. Accepts forms like `1e7` or `10_000`.
    """
    raw = os.environ.get(key, "").strip()
    if not raw:
        return default
    try:
        value = int(float(raw)) if "e" in raw.lower() else int(raw)
    except ValueError:
        raise InvalidInput(f"{key} must be an integer, got {raw!r}") from None
    if value < minimum:
        raise InvalidInput(f"{key} must be at least {minimum}, got {value}")
    return value


@cache
def get_settings() -> Settings:
    """
    Settings from RANDCHAN_CAP, RANDCHAN_WORKERS and RANDCHAN_DIGITS, if set.

    Cached; call `get_settings.cache_clear()` after changing the environment.
    """
    return Settings(
        enumeration_cap=get_env_int(CAP_ENV, DEFAULT_CAP),
        workers=get_env_int(WORKERS_ENV, DEFAULT_WORKERS),
        digits=get_env_int(DIGITS_ENV, DEFAULT_DIGITS),
    )
