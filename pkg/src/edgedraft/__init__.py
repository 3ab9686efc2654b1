"""edgedraft: distributed speculative decoding for edge serving.

Resource-constrained devices draft tokens with small local models; a shared
server verifies batched drafts against a larger target model, so every
committed token follows the target model's distribution exactly.  Ships with a
deterministic network/workload simulator, a socket transport, and the
throughput/capacity/cost analytics.
"""

from .specdec import (
    DraftBlock,
    ProbVector,
    VerifyOutcome,
    accept_probability,
    expected_acceptance_rate,
    lossless_oracle,
    residual_distribution,
    verify_block,
)

__version__ = "0.1.0"

__all__ = [
    "DraftBlock",
    "ProbVector",
    "VerifyOutcome",
    "accept_probability",
    "expected_acceptance_rate",
    "lossless_oracle",
    "residual_distribution",
    "verify_block",
    "__version__",
]
