"""
Seed management: one root seed split into named, independent substreams.
"""

import hashlib
from typing import Optional

import numpy as np
import torch

from config import config
from utils.logging import get_logger

logger = get_logger(__name__)

STREAMS = ("data", "folds", "init", "dropout", "affine", "shuffle")


def _stream_key(name: str) -> int:
    # Stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


class SeedStreams:
    """Derives reproducible generators for named components from a root seed."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)

    def seed(self, name: str, index: int = 0) -> int:
        """Integer seed of substream ``name`` (``index`` separates e.g. folds)."""
        sequence = np.random.SeedSequence([self.root_seed, _stream_key(name), int(index)])
        return int(sequence.generate_state(1, dtype=np.uint32)[0])

    def numpy(self, name: str, index: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.seed(name, index))

    def torch(self, name: str, index: int = 0) -> torch.Generator:
        generator = torch.Generator()
        generator.manual_seed(self.seed(name, index))
        return generator

    def seed_torch_global(self, name: str, index: int = 0):
        """Seed torch's global RNG (dropout masks, default parameter init)."""
        torch.manual_seed(self.seed(name, index))


def configure_torch(num_threads: Optional[int] = None):
    """Apply thread cap and deterministic kernels for reproducible runs."""
    threads = num_threads or config.num_threads
    if threads:
        torch.set_num_threads(int(threads))
        logger.debug(f"Torch intra-op threads capped at {threads}")
    torch.use_deterministic_algorithms(True, warn_only=True)
