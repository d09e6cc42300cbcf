"""
Parameter pool, first-order update rules and the per-epoch batch schedule.
"""

from enum import IntEnum
import logging
from typing import Any, Dict, List, Optional, Type

import numpy as np

from .const import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    DEFAULT_LR_DISTANCE,
    DEFAULT_LR_OBJECT,
    DEFAULT_LR_POSITIONS,
    DEFAULT_LR_PROBE,
)
from .errors import ConfigError, ParameterError

logger = logging.getLogger(__name__)


GROUP_NAMES = ('object', 'probe', 'distance', 'positions')

DEFAULT_LEARNING_RATES = {
    'object': DEFAULT_LR_OBJECT,
    'probe': DEFAULT_LR_PROBE,
    'distance': DEFAULT_LR_DISTANCE,
    'positions': DEFAULT_LR_POSITIONS,
}


class OptimizerType(IntEnum):
    UNKNOWN = 0
    GD = 1
    ADAM = 2


def lookupOptimizerType(optimizerStr: str) -> OptimizerType:
    return {
        'GD': OptimizerType.GD,
        'ADAM': OptimizerType.ADAM,
    }.get(str(optimizerStr).upper(), OptimizerType.UNKNOWN)


class ParameterGroup():
    def __init__(self, name: str, learningRate: float, enabled: bool = True):
        self.name = name
        try:
            self.learningRate = float(learningRate)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid learning rate for group '{name}': {e}")
        self.enabled = bool(enabled)

    def getJson(self):
        return {
            'learningRate': self.learningRate,
            'enabled': self.enabled,
        }


class OptimPool():
    """
    The named parameter groups taking part in the joint regression, each with its own
    learning rate and enable flag.
    """

    def __init__(self, groups: Dict[str, ParameterGroup]):
        unknown = set(groups) - set(GROUP_NAMES)
        if unknown:
            raise ConfigError(f"Unknown parameter group(s): {sorted(unknown)}")
        self.groups = {name: groups.get(name, ParameterGroup(name, DEFAULT_LEARNING_RATES[name], False)) for name in GROUP_NAMES}

        if not any(g.enabled for g in self.groups.values()):
            raise ConfigError("At least one parameter group must be enabled")
        for g in self.groups.values():
            if g.enabled and not g.learningRate > 0:
                raise ConfigError(f"Learning rate of enabled group '{g.name}' must be > 0 ({g.learningRate})")

    @classmethod
    def fromConfigDict(cls, configDict: Optional[Dict[str, Any]]) -> "OptimPool":
        """
        configDict is the `groups` entry of a reconstruction config; missing groups
        and keys fall back to the defaults (every group enabled).
        """
        configDict = configDict or {}
        groups = {}
        for name, groupDict in configDict.items():
            if name not in GROUP_NAMES:
                raise ConfigError(f"Unknown parameter group '{name}'")
            groupDict = groupDict or {}
            unknownKeys = set(groupDict) - {'learningRate', 'enabled'}
            if unknownKeys:
                raise ConfigError(f"Unknown key(s) {sorted(unknownKeys)} in group '{name}'")
            groups[name] = ParameterGroup(
                name,
                groupDict.get('learningRate', DEFAULT_LEARNING_RATES[name]),
                groupDict.get('enabled', True),
            )
        for name in GROUP_NAMES:
            if name not in groups:
                groups[name] = ParameterGroup(name, DEFAULT_LEARNING_RATES[name], True)
        return cls(groups)

    def isEnabled(self, name: str) -> bool:
        return self.groups[name].enabled

    def learningRate(self, name: str) -> float:
        return self.groups[name].learningRate

    def getJson(self):
        return {name: g.getJson() for name, g in self.groups.items()}


###################################################################
#                                                                 #
#                          Update Rules                           #

def gdStep(x: np.ndarray, grad: np.ndarray, learningRate: float) -> np.ndarray:
    """
    x' = x - lr * grad, with the complex gradient convention of the autodiff module.
    """
    x = np.asarray(x)
    grad = np.asarray(grad)
    if x.shape != grad.shape:
        raise ParameterError(f"gdStep: parameter {x.shape} and gradient {grad.shape} differ")
    return (x - learningRate * grad).astype(x.dtype, copy=False)


def _realPairs(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return np.stack([a.real, a.imag], axis=-1)
    return a


def _fromRealPairs(a: np.ndarray, like: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(like):
        return (a[..., 0] + 1j * a[..., 1]).astype(like.dtype, copy=False)
    return a.astype(like.dtype, copy=False)


class AdamState():
    """
    Moments and step counts, kept per real coordinate (the real and imaginary parts
    of a complex parameter are independent coordinates).

    Coordinates whose gradient is exactly zero are skipped on purpose: their moments,
    step count and value stay as they are. Plain Adam would keep moving them on the
    decaying first moment; skipping makes a step with an all-zero gradient an exact
    no-op, so parameters outside the current batch (object pixels, position
    corrections of other windows) and a converged solution stay put.
    """

    def __init__(self, m: np.ndarray, v: np.ndarray, steps: np.ndarray, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, epsilon: float = ADAM_EPSILON):
        if m.shape != v.shape or m.shape != steps.shape:
            raise ParameterError("AdamState: m, v and steps must share one shape")
        self.m = m
        self.v = v
        self.steps = steps
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)

    @classmethod
    def zerosLike(cls, x: np.ndarray, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, epsilon: float = ADAM_EPSILON) -> "AdamState":
        shape = _realPairs(np.asarray(x)).shape
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=np.int64), beta1, beta2, epsilon)


def adamStep(state: AdamState, x: np.ndarray, grad: np.ndarray, learningRate: float) -> np.ndarray:
    """
    Bias-corrected Adam update. Updates `state` in place and returns x'.
    """
    x = np.asarray(x)
    grad = np.asarray(grad)
    if x.shape != grad.shape:
        raise ParameterError(f"adamStep: parameter {x.shape} and gradient {grad.shape} differ")

    g = _realPairs(grad).astype(np.float64)
    if g.shape != state.m.shape:
        raise ParameterError(f"adamStep: state shape {state.m.shape} does not match parameter {g.shape}")

    active = g != 0
    if not np.any(active):
        return x

    b1, b2 = state.beta1, state.beta2
    state.steps = state.steps + active
    state.m = np.where(active, b1 * state.m + (1 - b1) * g, state.m)
    state.v = np.where(active, b2 * state.v + (1 - b2) * g * g, state.v)

    t = np.maximum(state.steps, 1)
    mHat = state.m / (1 - b1 ** t)
    vHat = state.v / (1 - b2 ** t)
    update = np.where(active, learningRate * mHat / (np.sqrt(vHat) + state.epsilon), 0.0)

    return _fromRealPairs(_realPairs(x) - update, x)

#                          Update Rules                           #
#                                                                 #
###################################################################


class Optimizer_Base():
    def __init__(self, pool: OptimPool):
        self.pool = pool

    def step(self, key: str, group: str, x: np.ndarray, grad: np.ndarray, learningRate: float) -> np.ndarray:
        """
        key
            Identifies the parameter (several parameters may share a group, e.g. the
            probe modes).
        """
        raise NotImplementedError()

    def stateArrays(self) -> Dict[str, np.ndarray]:
        return {}

    def loadStateArrays(self, arrays: Dict[str, np.ndarray]) -> None:
        pass


class Optimizer_GD(Optimizer_Base):
    def step(self, key, group, x, grad, learningRate):
        return gdStep(x, grad, learningRate)


class Optimizer_Adam(Optimizer_Base):
    def __init__(self, pool: OptimPool, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, epsilon: float = ADAM_EPSILON):
        super().__init__(pool)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.states: Dict[str, AdamState] = {}

    def step(self, key, group, x, grad, learningRate):
        if key not in self.states:
            self.states[key] = AdamState.zerosLike(x, self.beta1, self.beta2, self.epsilon)
        return adamStep(self.states[key], x, grad, learningRate)

    def stateArrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for key, s in self.states.items():
            arrays[f"adam/{key}/m"] = s.m
            arrays[f"adam/{key}/v"] = s.v
            arrays[f"adam/{key}/steps"] = s.steps
        return arrays

    def loadStateArrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.states = {}
        keys = {name.split('/')[1] for name in arrays if name.startswith('adam/')}
        for key in keys:
            self.states[key] = AdamState(
                np.array(arrays[f"adam/{key}/m"], dtype=np.float64),
                np.array(arrays[f"adam/{key}/v"], dtype=np.float64),
                np.array(arrays[f"adam/{key}/steps"], dtype=np.int64),
                self.beta1,
                self.beta2,
                self.epsilon,
            )


def lookupOptimizerCls(optimizerType: OptimizerType) -> Type[Optimizer_Base]:
    return {
        OptimizerType.GD: Optimizer_GD,
        OptimizerType.ADAM: Optimizer_Adam,
    }[optimizerType]


def batchIterator(numPositions: int, batchSize: int, seed: int, epoch: int) -> List[np.ndarray]:
    """
    Random partition of range(numPositions) into batches of `batchSize` (the last one
    may be shorter). The permutation depends only on (seed, epoch): each epoch draws
    from its own block of a counter-based Philox stream.
    """
    numPositions = int(numPositions)
    batchSize = int(batchSize)
    if numPositions < 1:
        raise ParameterError("batchIterator: at least one position is required")
    if not 1 <= batchSize <= numPositions:
        raise ParameterError(f"batchIterator: batch size must be in [1, {numPositions}], got {batchSize}")
    if seed < 0 or epoch < 0:
        raise ParameterError("batchIterator: seed and epoch must be >= 0")

    rng = np.random.Generator(np.random.Philox(key=int(seed), counter=int(epoch) << 128))
    permutation = rng.permutation(numPositions)
    return [permutation[i:i + batchSize] for i in range(0, numPositions, batchSize)]
