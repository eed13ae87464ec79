"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so keep the split between
caller mistakes (``PreconditionError``), bad inputs on disk
(``DataError``) and misbehaving hooks (``HookContractError``).
"""


class HRVError(Exception):
    """Base class for all package errors."""


class PreconditionError(HRVError, ValueError):
    """Arguments violate an operation's stated preconditions."""


class UnknownConceptError(PreconditionError, KeyError):
    def __init__(self, name, known=()):
        self.name = name
        msg = f"unknown concept {name!r}"
        if known:
            msg += f" (known: {', '.join(known)})"
        super().__init__(msg)

    def __str__(self):
        return self.args[0]


class AlignmentError(PreconditionError):
    """Source and target prompts cannot be aligned token-for-token."""


class DataError(HRVError):
    """Malformed or inconsistent data (files, encodings, key banks)."""


class HookContractError(HRVError):
    def __init__(self, t, head, detail):
        self.t = t
        self.head = head
        super().__init__(f"transform at t={t}, head={head} broke the hook contract: {detail}")


class TraceError(DataError):
    """Base for ATRACE/1 decoding failures."""


class TraceVersionError(TraceError):
    pass


class TraceTruncatedError(TraceError):
    pass


class TraceChecksumError(TraceError):
    pass
