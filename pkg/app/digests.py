import hashlib
from typing import Iterable

import numpy as np
import torch
from torch import nn


def parameter_digest(params: nn.Module | Iterable[torch.Tensor]) -> str:
    """
    SHA-256 по именам и байтам параметров (и буферов модуля) в порядке имён.
    """
    digest = hashlib.sha256()
    if isinstance(params, nn.Module):
        named = dict(params.named_parameters())
        named.update(dict(params.named_buffers()))
        items = sorted(named.items())
    else:
        items = [(str(i), p) for i, p in enumerate(params)]
    for name, tensor in items:
        array = np.ascontiguousarray(tensor.detach().cpu().numpy())
        digest.update(name.encode("utf-8"))
        digest.update(str(array.dtype).encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()
