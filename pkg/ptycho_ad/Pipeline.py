"""
Command implementations behind cli_ptycho.py: simulate, reconstruct, evaluate, profile.
"""

import csv
import io
import logging
import math
import os
import queue
import threading
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .Dataset import GroundTruth, loadDataset, loadTruth, saveDataset, saveTruth
from .ImageExport import atomicWriteText, saveArray, saveComplexPngs, saveMagnitudePng, savePhasePng, writeYaml
from .Metrics import SSIM_WINDOW, LineProfile, PositionErrorStats, compareObjects, lineProfileFwhm, positionErrorStats, scanRegionShape
from .Reconstructor import ReconstructionState, Reconstructor
from .RunConfig import RunConfig, writeResolvedConfig
from .Simulator import synthesizeDataset
from .errors import ConfigError, DatasetShapeError, ReconstructionDivergedError

logger = logging.getLogger(__name__)

DATASET_NAME = 'dataset.yaml'
TRUTH_NAME = 'truth.npz'
SNAPSHOT_NAME = 'snapshot.npz'
HISTORY_NAME = 'history.csv'


def _csvText(header: List[str], rows) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


###################################################################
#                                                                 #
#                             simulate                            #

def runSimulate(recipePath: Optional[str], outDir: str) -> Tuple[str, str]:
    """
    Returns (manifest path, truth path).
    """
    runConfig = RunConfig.fromConfigFile(recipePath)
    dataset, truth = synthesizeDataset(runConfig.recipe)

    os.makedirs(outDir, exist_ok=True)
    manifestPath = os.path.join(outDir, DATASET_NAME)
    truthPath = os.path.join(outDir, TRUTH_NAME)
    saveDataset(dataset, manifestPath)
    saveTruth(truth, truthPath)
    writeResolvedConfig(outDir, {'recipe': runConfig.recipe.getJson()})

    logger.info(f"Simulated dataset written to {outDir}")
    return manifestPath, truthPath

#                             simulate                            #
#                                                                 #
###################################################################


###################################################################
#                                                                 #
#                           reconstruct                           #

class CheckpointWriter():
    """
    Consumes Reconstructor output messages and writes checkpoint images.
    """

    def __init__(self, reconstructor: Reconstructor, outDir: str, statusCb=None):
        self.reconstructor = reconstructor
        self.outDir = outDir
        self.statusCb = statusCb
        self.messages: "queue.Queue[Dict[str, Any]]" = queue.Queue()
        self.checkpoints: List[int] = []

        reconstructor.addOutputQueue(self.messages)
        reconstructor.addProcessQueueCallback(self.processMessages)

    def processMessages(self):
        try:
            while True:
                msg = self.messages.get(False)
                if msg['type'] == "Checkpoint":
                    self.writeCheckpoint(msg['data']['epoch'])
                if self.statusCb is not None:
                    self.statusCb(msg)
                self.messages.task_done()
        except queue.Empty:
            pass

    def writeCheckpoint(self, epoch: int):
        state = self.reconstructor.state
        if state is None:
            return
        tag = f"e{epoch:05d}"
        saveMagnitudePng(os.path.join(self.outDir, f"object-magnitude-{tag}.png"), state.obj)
        savePhasePng(os.path.join(self.outDir, f"object-phase-{tag}.png"), state.obj)
        saveArray(os.path.join(self.outDir, f"object-{tag}.npy"), state.obj)
        self.checkpoints.append(epoch)
        logger.debug(f"Checkpoint {epoch} written")


def writeFinalOutputs(state: ReconstructionState, outDir: str) -> None:
    for m, mode in enumerate(state.probeModes):
        saveComplexPngs(os.path.join(outDir, f"probe-mode-{m}"), mode)
    saveArray(os.path.join(outDir, 'probe-modes.npy'), state.probeModes)
    atomicWriteText(os.path.join(outDir, HISTORY_NAME), state.history.toCsv())
    state.saveSnapshot(os.path.join(outDir, SNAPSHOT_NAME))


def runReconstruct(
        manifestPath: str,
        configPath: Optional[str],
        outDir: str,
        resumePath: Optional[str] = None,
        truthPath: Optional[str] = None,
        monitorWsHost: Optional[str] = None,
        monitorWsPort: Optional[int] = None,
        reconstructorCb=None,
        statusCb=None,
    ) -> ReconstructionState:
    """
    reconstructorCb
        Called with the Reconstructor before the run starts (signal handler hookup).
    statusCb
        Called with every Reconstructor message.
    """
    runConfig = RunConfig.fromConfigFile(configPath)
    config = runConfig.reconstruction
    dataset = loadDataset(manifestPath)
    truth = loadTruth(truthPath) if truthPath else None

    initialState = None
    if resumePath:
        initialState = ReconstructionState.loadSnapshot(resumePath)
        if len(initialState.nominal_m) != dataset.numPatterns:
            raise DatasetShapeError(f"Snapshot has {len(initialState.nominal_m)} positions, dataset has {dataset.numPatterns}")
        if initialState.probeModes.shape[1:] != dataset.patternShape:
            raise DatasetShapeError(f"Snapshot probe {initialState.probeModes.shape[1:]} does not match patterns {dataset.patternShape}")
        logger.info(f"Resuming from {resumePath} at epoch {initialState.epoch}")

    os.makedirs(outDir, exist_ok=True)
    writeResolvedConfig(outDir, {'reconstruction': config.getJson()})

    reconstructor = Reconstructor(dataset, config, truth)
    CheckpointWriter(reconstructor, outDir, statusCb)
    if reconstructorCb is not None:
        reconstructorCb(reconstructor)

    monitorStopEvent = None
    if monitorWsHost and monitorWsPort:
        from .MonitorWeb import monitorWebsocketRun

        monitorStopEvent = threading.Event()
        monitorThread = threading.Thread(
            target=monitorWebsocketRun,
            daemon=True,
            args=(reconstructor, monitorWsHost, monitorWsPort, monitorStopEvent))
        monitorThread.start()

    try:
        state = reconstructor.run(initialState)
    except ReconstructionDivergedError as e:
        if e.state is not None:
            writeFinalOutputs(e.state, outDir)
        raise
    finally:
        if monitorStopEvent is not None:
            monitorStopEvent.set()

    writeFinalOutputs(state, outDir)
    logger.info(f"Reconstruction finished at epoch {state.epoch}, z {state.distance_m:.6g} m")
    return state

#                           reconstruct                           #
#                                                                 #
###################################################################


###################################################################
#                                                                 #
#                             evaluate                            #

def evaluateState(state: ReconstructionState, truth: GroundTruth) -> Tuple[Dict[str, Any], PositionErrorStats]:
    """
    SSIM of the aligned object over the scanned region, distance error and
    position-error summary.
    """
    truthPx = truth.positions_m / state.pixelPitch_m
    stats = positionErrorStats(state.estimated_px, truthPx)

    probeSide = min(state.probeModes.shape[1:])
    roi = scanRegionShape(truthPx, probeSide / 8.0)
    result: Dict[str, Any] = {}
    if min(roi) >= SSIM_WINDOW and min(state.obj.shape) >= SSIM_WINDOW and min(truth.obj.shape) >= SSIM_WINDOW:
        result.update(compareObjects(state.obj, truth.obj, roi))
    else:
        logger.warning(f"Scanned region {roi} smaller than the SSIM window; SSIM skipped")
        result.update({'ssimMagnitude': None, 'ssimPhase': None})

    result.update({
        'distance_m': state.distance_m,
        'trueDistance_m': truth.distance_m,
        'distanceRelativeError': abs(state.distance_m - truth.distance_m) / truth.distance_m,
        'positionError': stats.getJson(),
        'epoch': state.epoch,
    })
    return result, stats


def runEvaluate(reconDir: str, truthPath: str, outDir: str) -> Dict[str, Any]:
    state = ReconstructionState.loadSnapshot(os.path.join(reconDir, SNAPSHOT_NAME))
    truth = loadTruth(truthPath)
    if len(truth.positions_m) != len(state.nominal_m):
        raise DatasetShapeError(f"Truth has {len(truth.positions_m)} positions, reconstruction has {len(state.nominal_m)}")

    evaluation, stats = evaluateState(state, truth)

    os.makedirs(outDir, exist_ok=True)
    writeYaml(os.path.join(outDir, 'evaluation.yaml'), {k: (float(v) if isinstance(v, np.floating) else v) for k, v in evaluation.items()})

    est = state.estimated_px
    truthPx = truth.positions_m / state.pixelPitch_m
    atomicWriteText(os.path.join(outDir, 'position-errors.csv'), _csvText(
        ['index', 'estimatedX_px', 'estimatedY_px', 'trueX_px', 'trueY_px', 'error_px'],
        ([j, repr(float(est[j, 0])), repr(float(est[j, 1])), repr(float(truthPx[j, 0])), repr(float(truthPx[j, 1])), repr(float(stats.errors_px[j]))] for j in range(len(est))),
    ))
    edges = stats.histogramEdges
    atomicWriteText(os.path.join(outDir, 'position-histogram.csv'), _csvText(
        ['binLow_px', 'binHigh_px', 'count'],
        ([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)] for i, c in enumerate(stats.histogramCounts)),
    ))
    atomicWriteText(os.path.join(outDir, 'z-trajectory.csv'), _csvText(
        ['epoch', 'distance_m'],
        ([r.epoch, repr(r.distance_m)] for r in state.history.records),
    ))

    logger.info(f"Evaluation written to {outDir}")
    return evaluation

#                             evaluate                            #
#                                                                 #
###################################################################


def loadImage(path: str) -> np.ndarray:
    """
    .npy arrays (complex arrays give their magnitude) or any Pillow-readable image.
    """
    if path.lower().endswith('.npy'):
        image = np.load(path, allow_pickle=False)
        if np.iscomplexobj(image):
            image = np.abs(image)
    else:
        with Image.open(path) as F_IMAGE:
            image = np.array(F_IMAGE.convert('F'))
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ConfigError(f"{path}: expected a 2D image, got shape {image.shape}")
    return image


def profileCsv(profile: LineProfile) -> str:
    text = _csvText(['distance_px', 'value'], ([repr(float(d)), repr(float(v))] for d, v in zip(profile.distance_px, profile.values)))
    width = 'nan' if math.isnan(profile.width_px) else repr(float(profile.width_px))
    return text + f"# fwhm_px={width},kind={profile.kind}\n"


def runProfile(imagePath: str, p0: Tuple[float, float], p1: Tuple[float, float], samples: Optional[int] = None, outPath: Optional[str] = None) -> Tuple[LineProfile, str]:
    profile = lineProfileFwhm(loadImage(imagePath), p0, p1, samples)
    text = profileCsv(profile)
    if outPath:
        atomicWriteText(outPath, text)
    return profile, text
