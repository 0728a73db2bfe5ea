"""
Central finite-difference verification of autograd gradients.
"""

from typing import Callable, Dict, Iterable, Optional, Tuple

import torch

from utils.logging import get_logger

logger = get_logger(__name__)


def finite_difference_errors(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Iterable[Tuple[str, torch.Tensor]],
    eps: float = 1e-4,
    max_entries: Optional[int] = 32,
    scale_floor: float = 1e-2,
    generator: Optional[torch.Generator] = None
) -> Dict[str, float]:
    """
    Compare autograd gradients with central differences, entry by entry.

    ``loss_fn`` must be a deterministic scalar function of the given leaf
    tensors (put modules in eval mode and use float64). Each checked entry is
    perturbed in place by +/- eps and restored afterwards.

    Args:
        loss_fn: Zero-argument closure returning a scalar tensor
        tensors: (name, tensor) pairs, e.g. ``module.named_parameters()``
        eps: Finite-difference step
        max_entries: Entries sampled per tensor (None checks all of them)
        scale_floor: Lower bound of the denominator of the relative error
        generator: RNG used to sample entries

    Returns:
        Maximum relative error per tensor name
    """
    named = [(name, t) for name, t in tensors if t.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [t for _, t in named], allow_unused=True)

    errors: Dict[str, float] = {}
    with torch.no_grad():
        for (name, tensor), grad in zip(named, grads):
            analytic = torch.zeros_like(tensor) if grad is None else grad
            flat = tensor.view(-1)
            if max_entries is None or flat.numel() <= max_entries:
                indices = torch.arange(flat.numel())
            else:
                indices = torch.randperm(flat.numel(), generator=generator)[:max_entries]

            worst = 0.0
            for index in indices.tolist():
                original = flat[index].item()
                flat[index] = original + eps
                plus = loss_fn().item()
                flat[index] = original - eps
                minus = loss_fn().item()
                flat[index] = original

                numeric = (plus - minus) / (2 * eps)
                exact = analytic.view(-1)[index].item()
                scale = max(abs(exact), abs(numeric), scale_floor)
                worst = max(worst, abs(exact - numeric) / scale)
            errors[name] = worst
            logger.debug(f"Gradient check {name}: max relative error {worst:.2e}")
    return errors
