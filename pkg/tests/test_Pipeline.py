import json
import os
import signal
import sys

import numpy as np
import pytest
import yaml

import cli_ptycho
from ptycho_ad.Pipeline import (
    DATASET_NAME,
    HISTORY_NAME,
    SNAPSHOT_NAME,
    TRUTH_NAME,
    runReconstruct,
    runSimulate,
)
from ptycho_ad.Reconstructor import ReconstructionState
from ptycho_ad.RunConfig import RESOLVED_CONFIG_NAME, RunConfig
from ptycho_ad.errors import ConfigError, DatasetShapeError

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

SMALL_RECIPE = {
    'pixelPitch_m': 5e-6,
    'patternSize': 16,
    'gridSize': 3,
    'overlap': 0.5,
    'probeRadius_px': 4.0,
    'scanJitterStd_px': 0.5,
    'positionJitterStd_px': 1.0,
    'seed': 3,
}


def _writeConfig(path, **sections):
    with open(path, 'w') as F:
        yaml.safe_dump(sections, F)
    return str(path)


def _cli(monkeypatch, *args):
    monkeypatch.setattr(sys, 'argv', ['ptycho-ad'] + [str(a) for a in args])
    cli_ptycho.main()


def _readBytes(path):
    with open(path, 'rb') as F:
        return F.read()


@pytest.fixture
def simulated(tmp_path, monkeypatch):
    recipePath = _writeConfig(tmp_path / 'recipe.yaml', recipe=SMALL_RECIPE)
    outDir = tmp_path / 'sim'
    _cli(monkeypatch, 'simulate', '--recipe', recipePath, '--out', outDir)
    return outDir


def _reconConfig(tmp_path, name='recon.yaml', **overrides):
    reconstruction = {'epochs': 3, 'batchSize': 4, 'checkpointInterval': 2, 'seed': 1}
    reconstruction.update(overrides)
    return _writeConfig(tmp_path / name, reconstruction=reconstruction)


def test_example_configs_load():
    recipe = RunConfig.fromConfigFile(os.path.join(REPO_ROOT, 'example-recipe.yaml')).recipe
    assert recipe.patternSize == 64
    assert recipe.positionJitterStd_px == 5.0

    config = RunConfig.fromConfigFile(os.path.join(REPO_ROOT, 'example-reconstruct.yaml')).reconstruction
    assert config.epochs == 500
    assert config.pool.learningRate('distance') == 0.01

    assert RunConfig.fromConfigFile(None).reconstruction.epochs == 500


def test_run_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.fromConfigDict({'reconstructions': {}})
    with pytest.raises(ConfigError):
        RunConfig.fromConfigDict(['recipe'])

    broken = tmp_path / 'broken.yaml'
    broken.write_text("recipe: [unclosed\n")
    with pytest.raises(ConfigError):
        RunConfig.fromConfigFile(str(broken))


def test_simulate_writes_dataset_and_truth(simulated):
    for name in [DATASET_NAME, 'dataset.bin', TRUTH_NAME, RESOLVED_CONFIG_NAME]:
        assert os.path.exists(os.path.join(simulated, name))
    with open(os.path.join(simulated, RESOLVED_CONFIG_NAME)) as F:
        assert yaml.safe_load(F)['recipe']['patternSize'] == 16


def test_simulate_is_bit_identical(tmp_path, simulated):
    recipePath = _writeConfig(tmp_path / 'again.yaml', recipe=SMALL_RECIPE)
    runSimulate(recipePath, str(tmp_path / 'again'))
    for name in ['dataset.bin', DATASET_NAME, TRUTH_NAME]:
        assert _readBytes(os.path.join(simulated, name)) == _readBytes(os.path.join(tmp_path, 'again', name))


def test_reconstruct_outputs(tmp_path, monkeypatch, capsys, simulated):
    handlers = {}
    monkeypatch.setattr(cli_ptycho.signal, 'signal', lambda sig, handler: handlers.__setitem__(sig, handler))
    outDir = tmp_path / 'recon'
    _cli(monkeypatch, 'reconstruct', '--data', simulated / DATASET_NAME, '--config', _reconConfig(tmp_path), '--out', outDir, '--truth', simulated / TRUTH_NAME)

    out = capsys.readouterr().out
    assert out.splitlines() == ['checkpoint 0', 'checkpoint 2', 'checkpoint 3']
    assert set(handlers) == {signal.SIGINT, signal.SIGTERM}
    for epoch in (0, 2, 3):
        for name in [f'object-magnitude-e{epoch:05d}.png', f'object-phase-e{epoch:05d}.png', f'object-e{epoch:05d}.npy']:
            assert os.path.exists(os.path.join(outDir, name))
    for name in [SNAPSHOT_NAME, HISTORY_NAME, 'probe-modes.npy', 'probe-mode-0-magnitude.png', 'probe-mode-0-phase.png', RESOLVED_CONFIG_NAME]:
        assert os.path.exists(os.path.join(outDir, name))

    state = ReconstructionState.loadSnapshot(str(outDir / SNAPSHOT_NAME))
    assert state.epoch == 3
    np.testing.assert_array_equal(np.load(str(outDir / 'object-e00003.npy')), state.obj)
    assert len((outDir / HISTORY_NAME).read_text().splitlines()) == 4


def test_reconstruct_is_bit_identical(tmp_path, simulated):
    configPath = _reconConfig(tmp_path)
    runReconstruct(str(simulated / DATASET_NAME), configPath, str(tmp_path / 'a'))
    runReconstruct(str(simulated / DATASET_NAME), configPath, str(tmp_path / 'b'))
    assert _readBytes(os.path.join(tmp_path, 'a', SNAPSHOT_NAME)) == _readBytes(os.path.join(tmp_path, 'b', SNAPSHOT_NAME))


def test_resume_continues_the_run(tmp_path, simulated):
    manifest = str(simulated / DATASET_NAME)
    straight = runReconstruct(manifest, _reconConfig(tmp_path, 'four.yaml', epochs=4), str(tmp_path / 'straight'))

    runReconstruct(manifest, _reconConfig(tmp_path, 'two.yaml', epochs=2), str(tmp_path / 'first'))
    resumed = runReconstruct(manifest, _reconConfig(tmp_path, 'four.yaml', epochs=4), str(tmp_path / 'second'), resumePath=str(tmp_path / 'first' / SNAPSHOT_NAME))

    assert resumed.epoch == 4
    np.testing.assert_array_equal(resumed.obj, straight.obj)
    np.testing.assert_array_equal(resumed.corrections, straight.corrections)
    assert resumed.distance_m == straight.distance_m


def test_resume_rejects_other_dataset(tmp_path, simulated):
    manifest = str(simulated / DATASET_NAME)
    runReconstruct(manifest, _reconConfig(tmp_path, epochs=1), str(tmp_path / 'first'))

    otherRecipe = dict(SMALL_RECIPE, gridSize=2)
    otherDir = tmp_path / 'other'
    runSimulate(_writeConfig(tmp_path / 'other.yaml', recipe=otherRecipe), str(otherDir))
    with pytest.raises(DatasetShapeError):
        runReconstruct(str(otherDir / DATASET_NAME), None, str(tmp_path / 'second'), resumePath=str(tmp_path / 'first' / SNAPSHOT_NAME))


def test_evaluate(tmp_path, monkeypatch, capsys, simulated):
    reconDir = tmp_path / 'recon'
    runReconstruct(str(simulated / DATASET_NAME), _reconConfig(tmp_path), str(reconDir))
    capsys.readouterr()

    evalDir = tmp_path / 'eval'
    _cli(monkeypatch, 'evaluate', '--recon', reconDir, '--truth', simulated / TRUTH_NAME, '--out', evalDir)

    printed = json.loads(capsys.readouterr().out)
    assert printed['epoch'] == 3
    assert printed['trueDistance_m'] == pytest.approx(0.1)
    assert -1 <= printed['ssimMagnitude'] <= 1

    with open(os.path.join(evalDir, 'evaluation.yaml')) as F:
        evaluation = yaml.safe_load(F)
    assert evaluation['distanceRelativeError'] == pytest.approx(printed['distanceRelativeError'])
    assert set(evaluation['positionError']) == {'median_px', 'mean_px', 'max_px'}

    assert len((evalDir / 'position-errors.csv').read_text().splitlines()) == 10
    assert (evalDir / 'position-histogram.csv').read_text().startswith('binLow_px,binHigh_px,count')
    assert len((evalDir / 'z-trajectory.csv').read_text().splitlines()) == 4


def test_profile(tmp_path, monkeypatch, capsys):
    x = np.arange(41)
    imagePath = str(tmp_path / 'peak.npy')
    np.save(imagePath, np.tile(np.exp(-0.5 * ((x - 20) / 3.0) ** 2), (5, 1)) + 0j)

    _cli(monkeypatch, 'profile', '--image', imagePath, '--from', '0,2', '--to', '40,2', '--samples', 161)
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == 'distance_px,value'
    assert len(lines) == 163
    assert lines[-1].startswith('# fwhm_px=7.')
    assert lines[-1].endswith('kind=peak')

    outPath = tmp_path / 'profile.csv'
    _cli(monkeypatch, 'profile', '--image', imagePath, '--from', '0,2', '--to', '40,2', '--out', outPath)
    assert capsys.readouterr().out == ''
    assert outPath.read_text().startswith('distance_px,value')


def test_errors_exit_with_json(tmp_path, monkeypatch, capsys):
    with pytest.raises(SystemExit) as excInfo:
        _cli(monkeypatch, 'reconstruct', '--data', tmp_path / 'missing.yaml', '--out', tmp_path / 'out')
    assert excInfo.value.code == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['type'] == 'Error'
    assert error['data']['kind'] == 'OSError'

    badConfig = _writeConfig(tmp_path / 'bad.yaml', reconstruction={'optimizer': 'lbfgs'})
    with pytest.raises(SystemExit):
        _cli(monkeypatch, 'simulate', '--recipe', badConfig, '--out', tmp_path / 'sim')
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['data']['kind'] == 'ConfigError'
    assert 'lbfgs' in error['data']['error']

    badValue = _writeConfig(tmp_path / 'badValue.yaml', recipe=SMALL_RECIPE, reconstruction={'epochs': 'abc'})
    with pytest.raises(SystemExit) as excInfo:
        _cli(monkeypatch, 'simulate', '--recipe', badValue, '--out', tmp_path / 'sim')
    assert excInfo.value.code == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['data']['kind'] == 'ConfigError'

    brokenManifest = tmp_path / 'broken.yaml'
    brokenManifest.write_text('format: [unclosed\n')
    with pytest.raises(SystemExit) as excInfo:
        _cli(monkeypatch, 'reconstruct', '--data', brokenManifest, '--out', tmp_path / 'out')
    assert excInfo.value.code == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['data']['kind'] == 'DatasetFormatError'


def test_bad_point_argument(monkeypatch, capsys):
    with pytest.raises(SystemExit) as excInfo:
        _cli(monkeypatch, 'profile', '--image', 'x.npy', '--from', '3', '--to', '1,1')
    assert excInfo.value.code == 2
    assert "expected x,y" in capsys.readouterr().err
