"""
Simulator exceptions.

Every error raised by the simulator derives from PimError so callers
(the CLI, the results service) can catch one type and report it.
"""


class PimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(PimError):
    """Invalid machine, host or kernel configuration."""


class InvalidSizeError(PimError):
    """Zero or negative sizes for allocations and transfers."""


class ScratchpadExhaustedError(PimError):
    """A kernel's scratchpad buffers do not fit the WRAM budget."""


class UnalignedAccessError(PimError):
    """DMA or transfer address/size not a multiple of 8 bytes."""


class OutOfBoundsError(PimError):
    """Access outside the MRAM or WRAM image."""


class DeadlockError(PimError):
    """No tasklet can ever become ready again."""


class SyncError(PimError):
    """Misuse of a synchronization device."""


class TableFullError(PimError):
    """Linear probing visited every slot without finding room."""


class DuplicateKeyError(PimError):
    """A unique-key build saw the same key twice."""


class BucketOverflowError(PimError):
    """A partition bucket received more records than its offsets allow."""


class KernelActiveError(PimError):
    """Host transfer requested on a rank while a kernel runs there."""


class DestinationOverflowError(PimError):
    """Redistribution would overflow a destination DPU's MRAM."""


class DependencyCycleError(PimError):
    """Pipeline stages do not form a DAG."""


class SkewOverflowError(PimError):
    """One bucket or range exceeds a DPU's capacity."""


class RangeMismatchError(PimError):
    """Co-partitioned relations disagree on key ranges."""


class CapacityError(PimError):
    """Input columns do not fit the aggregate MRAM of the DPU set."""


class VerificationError(PimError):
    """Simulated result differs from the host oracle."""

    def __init__(self, message, first_difference=None):
        super().__init__(message)
        self.first_difference = first_difference
