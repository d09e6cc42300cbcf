"""
Joint reconstruction of object, probe modes, propagation distance and scan-position
corrections by gradient descent on the tape-differentiated forward model.
"""

from enum import IntEnum
import logging
import math
import queue
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .Autodiff import (
    Tape,
    Variable,
    VariableLike,
    absolute,
    add,
    asVariable,
    backward,
    index,
    modulusSquared,
    relu,
    scale,
    sqrt,
    subtract,
    sumReduce,
)
from .Dataset import GroundTruth, PtychoDataset
from .ForwardModel import ObjectMap, ProbeModes, ScanSet, outOfBoundsWindows, requiredObjectShape, simulateBatch
from .Metrics import (
    SSIM_WINDOW,
    ConvergenceHistory,
    EpochRecord,
    compareObjects,
    positionErrorStats,
    scanRegionShape,
)
from .Optics import PropagationSpec, fresnelRescale, propagate
from .Optimizer import (
    OptimPool,
    OptimizerType,
    Optimizer_Adam,
    Optimizer_Base,
    batchIterator,
    lookupOptimizerCls,
    lookupOptimizerType,
)
from .const import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CHECKPOINT_INTERVAL,
    DEFAULT_WEIGHT_OBJECT,
    DEFAULT_WEIGHT_POSITIONS,
    DEFAULT_WEIGHT_PROBE,
    EXTRA_MODE_ENERGY_FRACTION,
    SNAPSHOT_FORMAT_VERSION,
)
from .errors import ConfigError, DatasetFormatError, DimensionError, ReconstructionDivergedError
from .ImageExport import saveArrays

logger = logging.getLogger(__name__)


class LossDomain(IntEnum):
    UNKNOWN = 0
    AMPLITUDE = 1
    INTENSITY = 2


def lookupLossDomain(domainStr: str) -> LossDomain:
    return {
        'AMPLITUDE': LossDomain.AMPLITUDE,
        'INTENSITY': LossDomain.INTENSITY,
    }.get(str(domainStr).upper(), LossDomain.UNKNOWN)


###################################################################
#                                                                 #
#                           Loss Terms                            #

class Measurements():
    """
    Measured intensities, clamped to >= 0, with their square roots computed once.
    """

    def __init__(self, intensity: np.ndarray, clampedCount: int):
        self.intensity = intensity
        self.amplitude = np.sqrt(intensity)
        self.clampedCount = int(clampedCount)

    def __len__(self) -> int:
        return len(self.intensity)


def _clampNegative(meas: np.ndarray) -> Tuple[np.ndarray, int]:
    meas = np.asarray(meas, dtype=np.float64)
    negative = meas < 0
    count = int(np.count_nonzero(negative))
    if count:
        logger.warning(f"Clamped {count} negative measured values to zero")
        meas = np.where(negative, 0.0, meas)
    return meas, count


def prepareMeasurements(frames: np.ndarray) -> Measurements:
    clamped, count = _clampNegative(frames)
    return Measurements(clamped, count)


def dataFidelity(
        sim: VariableLike,
        meas: np.ndarray,
        domain: LossDomain = LossDomain.AMPLITUDE,
        measuredAmplitude: Optional[np.ndarray] = None,
    ) -> Variable:
    """
    AMPLITUDE: sum (sqrt(sim) - sqrt(meas))^2, INTENSITY: sum (sim - meas)^2.
    measuredAmplitude, when given, is used in place of sqrt(meas).
    """
    sim = asVariable(sim)
    meas = np.asarray(meas)
    if sim.shape != meas.shape:
        raise DimensionError(f"dataFidelity: simulated {sim.shape} vs measured {meas.shape}")

    if domain == LossDomain.AMPLITUDE:
        if measuredAmplitude is None:
            measuredAmplitude = np.sqrt(_clampNegative(meas)[0])
        residual = subtract(sqrt(sim), measuredAmplitude)
    elif domain == LossDomain.INTENSITY:
        residual = subtract(sim, _clampNegative(meas)[0])
    else:
        raise ConfigError(f"Unknown loss domain {domain}")
    return sumReduce(modulusSquared(residual))


class RegularizationWeights():
    def __init__(self, object: float = DEFAULT_WEIGHT_OBJECT, probe: float = DEFAULT_WEIGHT_PROBE, positions: float = DEFAULT_WEIGHT_POSITIONS):
        try:
            self.object = float(object)
            self.probe = float(probe)
            self.positions = float(positions)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid regularization weight: {e}")
        for name in ['object', 'probe', 'positions']:
            if getattr(self, name) < 0:
                raise ConfigError(f"Regularization weight '{name}' must be >= 0")

    @classmethod
    def fromConfigDict(cls, configDict: Optional[Dict[str, Any]]) -> "RegularizationWeights":
        configDict = configDict or {}
        unknown = set(configDict) - {'object', 'probe', 'positions'}
        if unknown:
            raise ConfigError(f"Unknown regularization key(s): {sorted(unknown)}")
        return cls(**configDict)

    def getJson(self):
        return {
            'object': self.object,
            'probe': self.probe,
            'positions': self.positions,
        }


class RegularizationTerms():
    def __init__(self, object: Variable, probe: Variable, positions: Variable):
        self.object = object
        self.probe = probe
        self.positions = positions
        self.total = add(add(object, probe), positions)

    def values(self) -> Dict[str, float]:
        return {
            'object': float(self.object.value),
            'probe': float(self.probe.value),
            'positions': float(self.positions.value),
        }


def _totalEnergy(probe: ProbeModes) -> Variable:
    energy: Optional[Variable] = None
    for mode in probe.modes:
        modeEnergy = sumReduce(modulusSquared(mode))
        energy = modeEnergy if energy is None else add(energy, modeEnergy)
    return energy


def probeEnergy(probeModes: np.ndarray) -> float:
    """
    Total energy of (M, rows, cols) probe modes, evaluated exactly as the
    regularizer does.
    """
    return float(_totalEnergy(ProbeModes.fromArrays(list(np.asarray(probeModes)))).value)


def regularization(
        obj: ObjectMap,
        probe: ProbeModes,
        corrections: VariableLike,
        weights: RegularizationWeights,
        energyTarget: float,
        batchIndices: Optional[Sequence[int]] = None,
    ) -> RegularizationTerms:
    """
    w_O * sum relu(|O| - 1)^2
      + w_P * (sum_p ||P_p||^2 - E_target)^2
      + w_t * ||corrections||_1 (restricted to batchIndices when given)
    """
    magnitude = sqrt(modulusSquared(obj.obj))
    objectTerm = scale(sumReduce(modulusSquared(relu(subtract(magnitude, 1.0)))), weights.object)

    probeTerm = scale(modulusSquared(subtract(_totalEnergy(probe), float(energyTarget))), weights.probe)

    corrections = asVariable(corrections)
    if batchIndices is not None:
        corrections = index(corrections, np.asarray(batchIndices, dtype=np.int64))
    positionsTerm = scale(sumReduce(absolute(corrections)), weights.positions)

    return RegularizationTerms(objectTerm, probeTerm, positionsTerm)


class LossReport():
    def __init__(self, dataFidelity: float, regularization: float, terms: Optional[Dict[str, float]] = None, batches: Optional[List["LossReport"]] = None):
        self.dataFidelity = float(dataFidelity)
        self.regularization = float(regularization)
        self.total = self.dataFidelity + self.regularization
        self.terms = dict(terms or {})
        self.batches = list(batches or [])

    @classmethod
    def aggregate(cls, reports: List["LossReport"]) -> "LossReport":
        terms: Dict[str, float] = {}
        for r in reports:
            for k, v in r.terms.items():
                terms[k] = terms.get(k, 0.0) + v
        return cls(
            sum(r.dataFidelity for r in reports),
            sum(r.regularization for r in reports),
            terms,
            reports,
        )

    def getJson(self):
        return {
            'dataFidelity': self.dataFidelity,
            'regularization': self.regularization,
            'total': self.total,
            'terms': self.terms,
        }

#                           Loss Terms                            #
#                                                                 #
###################################################################


def initialProbe(shape: Tuple[int, int], radius_px: float, energy: float, numModes: int = 1, seed: int = 0) -> np.ndarray:
    """
    (M, rows, cols) centered disks of uniform amplitude with total energy `energy`.
    Mode 0 has zero phase; the extra modes carry random phases and share
    EXTRA_MODE_ENERGY_FRACTION of the energy.
    """
    rows, cols = shape
    y = np.arange(rows) - (rows - 1) / 2.0
    x = np.arange(cols) - (cols - 1) / 2.0
    disk = (np.hypot(x[None, :], y[:, None]) <= radius_px).astype(np.complex128)
    if not np.any(disk.real):
        raise ConfigError(f"Probe radius {radius_px} px selects no pixel")

    rng = np.random.default_rng(seed)
    if numModes == 1:
        energies = [energy]
    else:
        energies = [energy * (1 - EXTRA_MODE_ENERGY_FRACTION)] + [energy * EXTRA_MODE_ENERGY_FRACTION / (numModes - 1)] * (numModes - 1)

    modes = []
    for m, e in enumerate(energies):
        mode = disk.copy()
        if m > 0:
            mode *= np.exp(1j * rng.uniform(-np.pi, np.pi, size=shape))
        mode *= math.sqrt(e / np.sum(np.abs(mode) ** 2))
        modes.append(mode)
    return np.stack(modes, axis=0)


class ReconstructionState():
    def __init__(
            self,
            obj: np.ndarray,
            probeModes: np.ndarray,
            z0_m: float,
            distanceScale: float,
            nominal_m: np.ndarray,
            corrections: np.ndarray,
            pixelPitch_m: float,
            epoch: int = 0,
            history: Optional[ConvergenceHistory] = None,
            optimizerArrays: Optional[Dict[str, np.ndarray]] = None,
            energyTarget: Optional[float] = None,
        ):
        """
        z0_m / distanceScale
            The distance is parameterized as z = z0 * (1 + u), u = distanceScale.
        corrections
            (J, 2) position corrections in normalized object coordinates.
        epoch
            Number of completed epochs.
        energyTarget
            Probe energy the regularizer pulls toward; None until a Reconstructor
            fixes it.
        """
        self.obj = np.asarray(obj)
        self.probeModes = np.asarray(probeModes)
        if self.probeModes.ndim == 2:
            self.probeModes = self.probeModes[None]
        self.z0_m = float(z0_m)
        self.distanceScale = float(distanceScale)
        self.nominal_m = np.asarray(nominal_m, dtype=np.float64).reshape(-1, 2)
        self.corrections = np.asarray(corrections, dtype=np.float64).reshape(-1, 2)
        self.pixelPitch_m = float(pixelPitch_m)
        self.epoch = int(epoch)
        self.history = history if history is not None else ConvergenceHistory()
        self.optimizerArrays = dict(optimizerArrays or {})
        self.energyTarget = None if energyTarget is None else float(energyTarget)

    @property
    def distance_m(self) -> float:
        return self.z0_m * (1 + self.distanceScale)

    def scanSet(self) -> ScanSet:
        return ScanSet(self.nominal_m, self.pixelPitch_m, self.corrections)

    @property
    def estimated_px(self) -> np.ndarray:
        return self.scanSet().estimated_px(self.obj.shape)

    def copy(self) -> "ReconstructionState":
        return ReconstructionState(
            self.obj.copy(),
            self.probeModes.copy(),
            self.z0_m,
            self.distanceScale,
            self.nominal_m.copy(),
            self.corrections.copy(),
            self.pixelPitch_m,
            self.epoch,
            ConvergenceHistory(list(self.history.records)),
            dict(self.optimizerArrays),
            self.energyTarget,
        )

    def saveSnapshot(self, path: str) -> None:
        arrays = {
            'version': np.array(SNAPSHOT_FORMAT_VERSION),
            'object': self.obj,
            'probeModes': self.probeModes,
            'z0_m': np.array(self.z0_m),
            'distanceScale': np.array(self.distanceScale),
            'nominal_m': self.nominal_m,
            'corrections': self.corrections,
            'pixelPitch_m': np.array(self.pixelPitch_m),
            'epoch': np.array(self.epoch),
            'history': self.history.toArray(),
        }
        if self.energyTarget is not None:
            arrays['energyTarget'] = np.array(self.energyTarget)
        arrays.update(self.optimizerArrays)
        saveArrays(path, arrays)

    @classmethod
    def loadSnapshot(cls, path: str) -> "ReconstructionState":
        with np.load(path, allow_pickle=False) as data:
            if 'version' not in data or int(data['version']) != SNAPSHOT_FORMAT_VERSION:
                raise DatasetFormatError(f"{path}: unsupported snapshot")
            try:
                return cls(
                    data['object'],
                    data['probeModes'],
                    float(data['z0_m']),
                    float(data['distanceScale']),
                    data['nominal_m'],
                    data['corrections'],
                    float(data['pixelPitch_m']),
                    int(data['epoch']),
                    ConvergenceHistory.fromArray(data['history']),
                    {k: data[k] for k in data.files if k.startswith('adam/')},
                    float(data['energyTarget']) if 'energyTarget' in data.files else None,
                )
            except KeyError as e:
                raise DatasetFormatError(f"{path}: missing snapshot entry {e}")


class ReconstructionConfig():
    KEYS = {
        'epochs', 'batchSize', 'lossDomain', 'optimizer', 'seed', 'precision', 'probeModes',
        'probeRadius_px', 'checkpointInterval', 'learningRateDecay', 'groups',
        'regularization', 'energyTarget', 'adam',
    }

    def __init__(
            self,
            epochs: int = 500,
            batchSize: int = DEFAULT_BATCH_SIZE,
            lossDomain: LossDomain = LossDomain.AMPLITUDE,
            optimizerType: OptimizerType = OptimizerType.ADAM,
            seed: int = 0,
            precision: str = 'double',
            probeModes: int = 1,
            probeRadius_px: Optional[float] = None,
            checkpointInterval: int = DEFAULT_CHECKPOINT_INTERVAL,
            learningRateDecay: float = 1.0,
            pool: Optional[OptimPool] = None,
            weights: Optional[RegularizationWeights] = None,
            energyTarget: Optional[float] = None,
            adamBeta1: float = ADAM_BETA1,
            adamBeta2: float = ADAM_BETA2,
            adamEpsilon: float = ADAM_EPSILON,
        ):
        """
        probeRadius_px
            Radius of the initial disk probe; None for a quarter of the pattern side.
        energyTarget
            Probe energy for the regularizer; None to take it from the resumed state
            or, for a fresh start, from estimateEnergyTarget().
        """
        try:
            self.epochs = int(epochs)
            self.batchSize = int(batchSize)
            self.seed = int(seed)
            self.probeModes = int(probeModes)
            self.probeRadius_px = None if probeRadius_px is None else float(probeRadius_px)
            self.checkpointInterval = int(checkpointInterval)
            self.learningRateDecay = float(learningRateDecay)
            self.energyTarget = None if energyTarget is None else float(energyTarget)
            self.adamBeta1 = float(adamBeta1)
            self.adamBeta2 = float(adamBeta2)
            self.adamEpsilon = float(adamEpsilon)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid reconstruction value: {e}")
        self.lossDomain = lossDomain
        self.optimizerType = optimizerType
        self.precision = precision
        self.pool = pool if pool is not None else OptimPool.fromConfigDict({})
        self.weights = weights if weights is not None else RegularizationWeights()

        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batchSize < 1:
            raise ConfigError("batchSize must be >= 1")
        if self.lossDomain == LossDomain.UNKNOWN:
            raise ConfigError("Unknown lossDomain")
        if self.optimizerType == OptimizerType.UNKNOWN:
            raise ConfigError("Unknown optimizer")
        if self.precision not in ('double', 'single'):
            raise ConfigError(f"precision must be 'double' or 'single', got '{self.precision}'")
        if self.probeModes < 1:
            raise ConfigError("probeModes must be >= 1")
        if self.checkpointInterval < 1:
            raise ConfigError("checkpointInterval must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if not self.learningRateDecay > 0:
            raise ConfigError("learningRateDecay must be > 0")

    @property
    def complexDtype(self):
        return np.complex64 if self.precision == 'single' else np.complex128

    @classmethod
    def fromConfigDict(cls, configDict: Optional[Dict[str, Any]]) -> "ReconstructionConfig":
        configDict = dict(configDict or {})
        unknown = set(configDict) - cls.KEYS
        if unknown:
            raise ConfigError(f"Unknown reconstruction key(s): {sorted(unknown)}")

        kwargs: Dict[str, Any] = {}
        for k in ['epochs', 'batchSize', 'seed', 'precision', 'probeModes', 'probeRadius_px', 'checkpointInterval', 'learningRateDecay', 'energyTarget']:
            if k in configDict:
                kwargs[k] = configDict[k]
        if 'lossDomain' in configDict:
            kwargs['lossDomain'] = lookupLossDomain(configDict['lossDomain'])
            if kwargs['lossDomain'] == LossDomain.UNKNOWN:
                raise ConfigError(f"Unknown lossDomain \"{configDict['lossDomain']}\"")
        if 'optimizer' in configDict:
            kwargs['optimizerType'] = lookupOptimizerType(configDict['optimizer'])
            if kwargs['optimizerType'] == OptimizerType.UNKNOWN:
                raise ConfigError(f"Unknown optimizer \"{configDict['optimizer']}\"")
        kwargs['pool'] = OptimPool.fromConfigDict(configDict.get('groups'))
        kwargs['weights'] = RegularizationWeights.fromConfigDict(configDict.get('regularization'))

        adamDict = configDict.get('adam') or {}
        unknownAdam = set(adamDict) - {'beta1', 'beta2', 'epsilon'}
        if unknownAdam:
            raise ConfigError(f"Unknown adam key(s): {sorted(unknownAdam)}")
        for k in ['beta1', 'beta2', 'epsilon']:
            if k in adamDict:
                kwargs['adam' + k[0].upper() + k[1:]] = adamDict[k]

        return cls(**kwargs)

    def getJson(self):
        return {
            'epochs': self.epochs,
            'batchSize': self.batchSize,
            'lossDomain': self.lossDomain.name.lower(),
            'optimizer': self.optimizerType.name.lower(),
            'seed': self.seed,
            'precision': self.precision,
            'probeModes': self.probeModes,
            'probeRadius_px': self.probeRadius_px,
            'checkpointInterval': self.checkpointInterval,
            'learningRateDecay': self.learningRateDecay,
            'groups': self.pool.getJson(),
            'regularization': self.weights.getJson(),
            'energyTarget': self.energyTarget,
            'adam': {
                'beta1': self.adamBeta1,
                'beta2': self.adamBeta2,
                'epsilon': self.adamEpsilon,
            },
        }


def _jsonSafe(values: Dict[str, Any]) -> Dict[str, Any]:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in values.items()}


class Reconstructor():
    def __init__(self, dataset: PtychoDataset, config: ReconstructionConfig, truth: Optional[GroundTruth] = None):
        self.dataset = dataset
        self.config = config
        self.truth = truth

        self.measurements = prepareMeasurements(dataset.correctedPatterns())
        self.patternShape: Tuple[int, int] = dataset.patternShape

        # Parallel-beam equivalent of a point-source geometry
        self.magnification = 1.0
        self.pixelPitch_m = dataset.pixelPitch_m
        self.initialDistance_m = dataset.distance_m
        if dataset.geometry is not None:
            self.initialDistance_m, self.magnification, self.pixelPitch_m = fresnelRescale(dataset.geometry)
            logger.info(f"Point-source geometry: magnification {self.magnification:.6g}, effective z {self.initialDistance_m:.6g} m")

        self.energyTarget = config.energyTarget if config.energyTarget is not None else self.estimateEnergyTarget()

        optimizerCls = lookupOptimizerCls(config.optimizerType)
        if optimizerCls is Optimizer_Adam:
            self.optimizer: Optimizer_Base = Optimizer_Adam(config.pool, config.adamBeta1, config.adamBeta2, config.adamEpsilon)
        else:
            self.optimizer = optimizerCls(config.pool)

        self.state: Optional[ReconstructionState] = None
        self.lastReport: Optional[LossReport] = None

        self._inputQueues: List[queue.Queue] = []
        self._outputQueues: List[queue.Queue] = []
        self._processQueueCallbacks: List[Callable[[], None]] = []
        self._stopFlag = False
        self._outOfBoundsWarned: Set[int] = set()

    def stop(self):
        self._stopFlag = True

    def addInputQueue(self, inQueue: queue.Queue):
        self._inputQueues.append(inQueue)

    def addOutputQueue(self, outQueue: queue.Queue):
        self._outputQueues.append(outQueue)

    def addProcessQueueCallback(self, cb):
        self._processQueueCallbacks.append(cb)

    def sendReconstructorMsg(self, msg):
        for oq in self._outputQueues:
            oq.put(msg)
        for cb in self._processQueueCallbacks:
            cb()

    def getJsonStatusMsg(self):
        state = self.state
        return {
            'type': 'status',
            'data': {
                'epoch': state.epoch if state else 0,
                'epochs': self.config.epochs,
                'distance_m': state.distance_m if state else self.initialDistance_m,
                'numPatterns': self.dataset.numPatterns,
                'patternShape': list(self.patternShape),
                'history': [_jsonSafe(r.getJson()) for r in state.history.records] if state else [],
            },
        }

    def _checkInputQueues(self):
        for iq in self._inputQueues:
            try:
                while True:
                    data = iq.get(False)
                    if data.get('type') == "Stop":
                        logger.info("Stop requested")
                        self.stop()
                    iq.task_done()
            except queue.Empty:
                pass

    @property
    def probeRadius_px(self) -> float:
        if self.config.probeRadius_px is not None:
            return self.config.probeRadius_px
        return min(self.patternShape) / 4.0

    def estimateEnergyTarget(self) -> float:
        """
        Probe energy implied by the brightest measured pattern. The part of the
        initial disk probe's energy that the detector window retains at the starting
        distance (flat object) corrects for light diffracted past the window edge.
        """
        brightest = float(self.measurements.intensity.sum(axis=(1, 2)).max())
        unitProbe = initialProbe(self.patternShape, self.probeRadius_px, 1.0, self.config.probeModes, self.config.seed)
        spec = PropagationSpec(self.dataset.wavelength_m, self.initialDistance_m, self.pixelPitch_m)
        retained = sum(float(np.sum(modulusSquared(propagate(mode, spec)).value)) for mode in unitProbe)
        if retained < 0.5:
            logger.warning(f"Detector window keeps only {retained:.3g} of the initial probe energy; consider a larger pattern or smaller distance")
        return brightest / min(max(retained, 1e-3), 1.0)

    def _warnOutOfBounds(self, state: ReconstructionState):
        flags = outOfBoundsWindows(state.scanSet(), state.obj.shape, state.probeModes.shape[1:])
        for j in np.flatnonzero(flags):
            if int(j) not in self._outOfBoundsWarned:
                self._outOfBoundsWarned.add(int(j))
                logger.warning(f"Scan window {j} reaches outside the object; outside samples contribute zero")

    def initialState(self) -> ReconstructionState:
        """
        Flat unit object, disk probe normalized to the energy target, the dataset's
        distance and nominal positions, zero corrections.
        """
        radius = self.probeRadius_px
        nominal = self.dataset.positions_m
        objectShape = requiredObjectShape(nominal / self.pixelPitch_m, self.patternShape)
        dtype = self.config.complexDtype
        return ReconstructionState(
            np.ones(objectShape, dtype=dtype),
            initialProbe(self.patternShape, radius, self.energyTarget, self.config.probeModes, self.config.seed).astype(dtype),
            self.initialDistance_m,
            0.0,
            nominal,
            np.zeros_like(nominal),
            self.pixelPitch_m,
            energyTarget=self.energyTarget,
        )

    ###################################################################
    #                                                                 #
    #                          Optimization                           #

    def step(self, state: ReconstructionState, indices: np.ndarray, epoch: int) -> LossReport:
        """
        One batch: forward, loss, backward and an update of every enabled group.
        `state` is left untouched when the loss or any update is not finite.
        """
        pool = self.config.pool
        dtype = self.config.complexDtype

        objVar = Variable(state.obj, requiresGrad=pool.isEnabled('object'), name='object')
        probeVars = [Variable(p, requiresGrad=pool.isEnabled('probe'), name=f'probe{i}') for i, p in enumerate(state.probeModes)]
        distanceVar = Variable(np.array(state.distanceScale), requiresGrad=pool.isEnabled('distance'), name='distance')
        correctionsVar = Variable(state.corrections, requiresGrad=pool.isEnabled('positions'), name='corrections')

        with Tape():
            z = add(scale(distanceVar, state.z0_m), state.z0_m)
            spec = PropagationSpec(self.dataset.wavelength_m, z, self.pixelPitch_m)
            obj = ObjectMap(objVar)
            probe = ProbeModes(probeVars)
            scan = ScanSet(state.nominal_m, state.pixelPitch_m, correctionsVar)

            sim = simulateBatch(probe, obj, scan, indices, spec)
            fidelity = dataFidelity(
                sim,
                self.measurements.intensity[indices],
                self.config.lossDomain,
                measuredAmplitude=self.measurements.amplitude[indices],
            )
            terms = regularization(obj, probe, correctionsVar, self.config.weights, self.energyTarget, indices)
            loss = add(fidelity, terms.total)

            if not np.isfinite(loss.value):
                raise ReconstructionDivergedError(f"Non-finite loss at epoch {epoch}", state=state)

        backward(loss)

        lrScale = self.config.learningRateDecay ** epoch

        def _update(key, group, x, var):
            if var.grad is None:
                return x
            return self.optimizer.step(key, group, x, var.grad, pool.learningRate(group) * lrScale)

        newObj = state.obj
        if pool.isEnabled('object'):
            newObj = _update('object', 'object', state.obj, objVar).astype(dtype)
        newProbes = state.probeModes
        if pool.isEnabled('probe'):
            newProbes = np.stack([_update(f'probe{i}', 'probe', p, v) for i, (p, v) in enumerate(zip(state.probeModes, probeVars))]).astype(dtype)
        newScale = state.distanceScale
        if pool.isEnabled('distance'):
            newScale = float(_update('distance', 'distance', np.array(state.distanceScale), distanceVar))
        newCorrections = state.corrections
        if pool.isEnabled('positions'):
            newCorrections = _update('positions', 'positions', state.corrections, correctionsVar)

        if not (np.all(np.isfinite(newObj)) and np.all(np.isfinite(newProbes)) and math.isfinite(newScale) and np.all(np.isfinite(newCorrections))):
            raise ReconstructionDivergedError(f"Non-finite parameter update at epoch {epoch}", state=state)

        state.obj = newObj
        state.probeModes = newProbes
        state.distanceScale = newScale
        state.corrections = newCorrections

        return LossReport(float(fidelity.value), float(terms.total.value), terms.values())

    def _truthMetrics(self, state: ReconstructionState) -> Dict[str, float]:
        if self.truth is None:
            return {}
        stats = positionErrorStats(state.estimated_px, self.truth.positions_m / state.pixelPitch_m)
        metrics = {
            'positionErrorMedian_px': stats.median_px,
            'positionErrorMean_px': stats.mean_px,
            'positionErrorMax_px': stats.max_px,
        }
        roi = scanRegionShape(self.truth.positions_m / state.pixelPitch_m, self.probeRadius_px / 2.0)
        if min(roi) >= SSIM_WINDOW and min(state.obj.shape) >= SSIM_WINDOW and min(self.truth.obj.shape) >= SSIM_WINDOW:
            metrics.update(compareObjects(state.obj, self.truth.obj, roi))
        return metrics

    def runEpoch(self, state: ReconstructionState) -> EpochRecord:
        epoch = state.epoch
        reports = []
        for indices in batchIterator(len(state.nominal_m), min(self.config.batchSize, len(state.nominal_m)), self.config.seed, epoch):
            reports.append(self.step(state, indices, epoch))
        report = LossReport.aggregate(reports)
        self.lastReport = report

        state.epoch += 1
        state.optimizerArrays = self.optimizer.stateArrays()
        record = EpochRecord(
            state.epoch,
            report.total,
            report.dataFidelity,
            report.regularization,
            state.distance_m,
            self.config.learningRateDecay ** epoch,
            **self._truthMetrics(state),
        )
        state.history.append(record)
        self._warnOutOfBounds(state)

        if math.isnan(record.positionErrorMedian_px):
            logger.info(f"Epoch {state.epoch}: loss {record.loss:.6g} z {record.distance_m:.6g} m")
        else:
            logger.info(f"Epoch {state.epoch}: loss {record.loss:.6g} z {record.distance_m:.6g} m position error {record.positionErrorMedian_px:.3g} px")
        return record

    def run(self, state: Optional[ReconstructionState] = None) -> ReconstructionState:
        """
        Run epochs until `config.epochs` epochs are complete (counting those already in
        `state`), a Stop is requested, or the loss diverges.
        """
        if state is None:
            state = self.initialState()
        if self.config.energyTarget is None and state.energyTarget is not None:
            self.energyTarget = state.energyTarget
        state.energyTarget = self.energyTarget
        self.state = state
        self.optimizer.loadStateArrays(state.optimizerArrays)
        self._warnOutOfBounds(state)

        if state.epoch == 0:
            self.sendReconstructorMsg({'type': 'Checkpoint', 'data': {'epoch': 0}})

        while state.epoch < self.config.epochs:
            self._checkInputQueues()
            if self._stopFlag:
                break

            try:
                record = self.runEpoch(state)
            except ReconstructionDivergedError as e:
                logger.warning(f"Reconstruction diverged: {e}")
                self.sendReconstructorMsg({'type': 'Diverged', 'data': {'epoch': state.epoch, 'error': str(e)}})
                raise

            self.sendReconstructorMsg({'type': 'EpochDone', 'data': _jsonSafe(record.getJson())})
            if state.epoch % self.config.checkpointInterval == 0 or state.epoch == self.config.epochs:
                self.sendReconstructorMsg({'type': 'Checkpoint', 'data': {'epoch': state.epoch}})

        if self._stopFlag and state.epoch % self.config.checkpointInterval != 0:
            self.sendReconstructorMsg({'type': 'Checkpoint', 'data': {'epoch': state.epoch}})

        self.sendReconstructorMsg({'type': 'Finished', 'data': {'epoch': state.epoch, 'stopped': self._stopFlag}})
        return state

    #                          Optimization                           #
    #                                                                 #
    ###################################################################


def reconstruct(
        dataset: PtychoDataset,
        config: ReconstructionConfig,
        truth: Optional[GroundTruth] = None,
        initialState: Optional[ReconstructionState] = None,
    ) -> Tuple[ReconstructionState, ConvergenceHistory]:
    state = Reconstructor(dataset, config, truth).run(initialState)
    return state, state.history
