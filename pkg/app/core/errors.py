# -*- coding: utf-8 -*-

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class DevftError(Exception):
    """
    Base error of the simulator. Carries a human-readable message.
    """

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return self.message


def exit_code_for(exc: BaseException) -> int:
    """
    Map an exception to the CLI exit code: validation errors -> 1, everything else -> 2.
    """
    # Local import keeps config free to import this module.
    from app.core.config import ConfigError

    if isinstance(exc, ConfigError):
        return EXIT_VALIDATION
    return EXIT_RUNTIME
