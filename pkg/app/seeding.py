from contextlib import contextmanager

import numpy as np
import torch


def derive_seed(*parts: int) -> int:
    """
    Сид, выведенный из кортежа целых (seed, epoch, step, ...). Общего состояния нет.
    """
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def torch_generator(*parts: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(derive_seed(*parts))
    return generator


@contextmanager
def seeded(seed: int):
    """
    Инициализация слоёв torch под фиксированным сидом без влияния на глобальный RNG.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
