from collections import deque
from typing import Iterable, List

import numpy as np

from common.errors import ParameterRangeError, ReplayUnderflowError


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ParameterRangeError(f"replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.rng = rng
        self.buffer = deque(maxlen=capacity)

    def __len__(self):
        return len(self.buffer)

    def push(self, transition):
        self.buffer.append(transition)

    def extend(self, transitions: Iterable):
        for transition in transitions:
            self.push(transition)

    def sample(self, batch_size: int) -> List:
        if batch_size > len(self.buffer):
            raise ReplayUnderflowError(f"asked for {batch_size} transitions, buffer holds {len(self.buffer)}")
        picks = self.rng.choice(len(self.buffer), size=batch_size, replace=False)
        return [self.buffer[i] for i in picks]
