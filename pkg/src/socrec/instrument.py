"""Multiply-accumulate instrumentation for the numeric kernels.

Every matrix product routes through a process-global counter so that the
cost of a forward pass can be asserted exactly: a sparse-dense product
contributes nnz * cols MACs, a dense product rows * inner * cols. Entrywise
operations (adds, sigmoids, row scalings) are not multiply-accumulates and
are not counted.
"""

from dataclasses import dataclass


@dataclass
class MacCounter:
    sparse_macs: int = 0
    dense_macs: int = 0

    @property
    def total(self) -> int:
        return self.sparse_macs + self.dense_macs

    def reset(self) -> None:
        self.sparse_macs = 0
        self.dense_macs = 0


#: Global counter shared by all kernels. Single-threaded by contract.
MACS = MacCounter()
