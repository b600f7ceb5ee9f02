"""Small shared helpers: dtype coercion, angle wrapping, stable seeding."""

import hashlib
import os

import numpy as np
import torch

# All internal math runs in float64; image inputs are promoted on entry.
DTYPE = torch.float64

TWO_PI = 2.0 * np.pi


def as_f64(x) -> torch.Tensor:
    """Coerce array-likes (numpy, list, tensor) to a float64 torch tensor.

    Tensors that already require grad are converted without detaching so the
    autograd graph is preserved.
    """
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def wrap_angle(theta: torch.Tensor) -> torch.Tensor:
    """Wrap angles to (-pi, pi].

    Uses round-based wrapping, which has unit gradient almost everywhere and
    is therefore safe inside differentiable phase pipelines.
    """
    return theta - TWO_PI * torch.round(theta / TWO_PI)


def stable_seed(*parts) -> int:
    """Derive a reproducible 63-bit seed from a tuple of ints/strings.

    Python's hash() is salted per process, so worker processes must not use
    it; this goes through sha256 instead and is stable across runs and
    machines.
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big") & 0x7FFFFFFFFFFFFFFF


def rng_for(*parts) -> np.random.Generator:
    """A numpy Generator keyed by a stable seed tuple."""
    return np.random.default_rng(stable_seed(*parts))


def thread_count() -> int:
    """Worker count from FRINGEFORGE_THREADS, default: available cores."""
    fallback = os.cpu_count() or 1
    raw = os.environ.get("FRINGEFORGE_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return fallback
    return max(1, n)


def configure_torch() -> None:
    """Pin torch to deterministic single-threaded execution.

    Results must not depend on intra-op thread count, so every process that
    does tensor math calls this once before computing.
    """
    torch.set_num_threads(1)
    torch.manual_seed(0)
