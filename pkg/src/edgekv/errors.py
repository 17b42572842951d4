"""Exception hierarchy shared by every EdgeKV module.

Errors that cross the network travel as a ``status`` string in response
payloads; the ``status`` attribute on each class is that string.
"""


class EdgeKVError(Exception):
    status = "error"


class InvalidArgument(EdgeKVError, ValueError):
    status = "invalid_argument"


class ProtocolError(EdgeKVError):
    status = "protocol_error"


class FrameTooLarge(ProtocolError):
    status = "frame_too_large"


class LookupFailed(EdgeKVError):
    status = "lookup_failed"

    def __init__(self, message, route=()):
        super().__init__(message)
        self.route = list(route)


class JoinFailed(EdgeKVError):
    status = "join_failed"


class IdCollision(JoinFailed):
    status = "id_collision"


class OverlayIsolated(EdgeKVError):
    status = "overlay_isolated"


class Unavailable(EdgeKVError):
    status = "unavailable"


class RequestTimeout(EdgeKVError):
    status = "timeout"


class GatewayUnavailable(Unavailable):
    status = "gateway_unavailable"


class GlobalUnavailable(Unavailable):
    status = "global_unavailable"


class GroupUnavailable(Unavailable):
    status = "group_unavailable"


class NoBackup(EdgeKVError):
    status = "no_backup"


class ConsistencyError(EdgeKVError):
    """Out-of-order apply; the store must be recovered before reuse."""

    status = "consistency_error"


class CorruptSnapshot(EdgeKVError):
    status = "corrupt_snapshot"


class HorizonExceeded(EdgeKVError):
    status = "horizon_exceeded"


class ConfigError(EdgeKVError):
    status = "config_error"
