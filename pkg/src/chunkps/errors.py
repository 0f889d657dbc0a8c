"""Exception taxonomy. Everything raised on purpose derives from ChunkPSError."""


class ChunkPSError(Exception):
    """Base class for all errors raised by this package."""


class InvalidSpecError(ChunkPSError):
    """Model spec rejected: empty key list or non-positive element count."""


class InvalidChunkSizeError(ChunkPSError):
    """Chunk size is not a positive multiple of the 4-byte element width."""


class InvalidConfigError(ChunkPSError):
    """Run configuration violates a documented precondition."""


class ProtocolError(ChunkPSError):
    """Malformed frame or a frame that violates the wire contract."""


class DuplicatePushError(ChunkPSError):
    """A worker contributed twice to the same (chunk, iteration)."""


class StaleIterationError(ChunkPSError):
    """Push tagged with an iteration other than the buffer's current one."""


class IncompleteAggregationError(ChunkPSError):
    """Finalize or reset requested before every worker contributed."""


class NumericFaultError(ChunkPSError):
    """Non-finite value produced where training must stay finite."""


class ChunkLookupError(ChunkPSError):
    """Chunk id not present in an assignment or store."""


class InvalidBatchError(ChunkPSError):
    """Gradient requested for an empty sample batch."""


class QuantizationRangeError(ChunkPSError):
    """Value too large to quantize without risking accumulator overflow."""


class SwitchOverflowError(ChunkPSError):
    """Integer aggregation exceeded the switch accumulator range."""


class WorkerAbortError(ChunkPSError):
    """Worker stopped after a server ERROR frame or a lost connection."""


class ServerFaultError(ChunkPSError):
    """Fatal server-side violation; carries ERROR frames to emit before exit.

    ``outbound`` is a list of (connection, encoded frame) pairs the driver
    should best-effort send before tearing the process down.
    """

    def __init__(self, reason: str, outbound=None):
        super().__init__(reason)
        self.reason = reason
        self.outbound = list(outbound or [])


class HarnessError(ChunkPSError):
    """Experiment orchestration failed; message carries role diagnostics."""
