"""Container lifecycle UID tables.

Two enumerations track a container through its life: the create-phase UID
records how far container startup got (index 8 meaning the script is
running in its own process group), and the get-phase UID classifies what
a status poll found. Index values and the derived UID name strings are a
fixed external contract.
"""
from __future__ import annotations

from enum import IntEnum

CREATE_UID_PREFIX = "create-cont-"
GET_UID_PREFIX = "get-cont-"

_CREATE_NAMES = (
    "readDefaultVolDirError",
    "copyFileError",
    "cmdStartError",
    "getPgidError",
    "createStdoutFileError",
    "createStderrFileError",
    "cmdWaitError",
    "writePgidError",
    "containerStarted",
)

_GET_NAMES = (
    "create",
    "getPidsError",
    "getStderrFileInfoError",
    "stderrNotEmpty",
    "completed",
    "running",
)


class CreateUid(IntEnum):
    READ_DEFAULT_VOL_DIR_ERROR = 0
    COPY_FILE_ERROR = 1
    CMD_START_ERROR = 2
    GET_PGID_ERROR = 3
    CREATE_STDOUT_FILE_ERROR = 4
    CREATE_STDERR_FILE_ERROR = 5
    CMD_WAIT_ERROR = 6
    WRITE_PGID_ERROR = 7
    CONTAINER_STARTED = 8

    @property
    def uid_name(self) -> str:
        return CREATE_UID_PREFIX + _CREATE_NAMES[self.value]


class GetUid(IntEnum):
    CREATE = 0
    GET_PIDS_ERROR = 1
    GET_STDERR_FILE_INFO_ERROR = 2
    STDERR_NOT_EMPTY = 3
    COMPLETED = 4
    RUNNING = 5

    @property
    def uid_name(self) -> str:
        return GET_UID_PREFIX + _GET_NAMES[self.value]


def create_uid_from_name(name: str) -> CreateUid:
    if name.startswith(CREATE_UID_PREFIX):
        short = name[len(CREATE_UID_PREFIX):]
        if short in _CREATE_NAMES:
            return CreateUid(_CREATE_NAMES.index(short))
    raise ValueError(f"unknown create UID name {name!r}")


def get_uid_from_name(name: str) -> GetUid:
    if name.startswith(GET_UID_PREFIX):
        short = name[len(GET_UID_PREFIX):]
        if short in _GET_NAMES:
            return GetUid(_GET_NAMES.index(short))
    raise ValueError(f"unknown get UID name {name!r}")
