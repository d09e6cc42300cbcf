import json
import threading
from types import SimpleNamespace

import pytest
from fastapi.testclient import TestClient

from ptycho_ad.MonitorWeb import STATUS_QUEUE_SIZE, DropOldestQueue, ReconstructorWeb, create_app, exitOnStop, ws_json
from ptycho_ad.Reconstructor import ReconstructionConfig, Reconstructor


@pytest.fixture
def bridge(tinyDataset):
    stopEvent = threading.Event()
    web = ReconstructorWeb(Reconstructor(tinyDataset, ReconstructionConfig(epochs=5)), stopEvent)
    yield web
    stopEvent.set()


def test_client_messages(bridge):
    assert bridge.handleClientMessage("{not json")['data']['error'] == "invalid json"
    assert bridge.handleClientMessage(json.dumps({'type': 'Pause'}))['data']['error'] == "unsupported message"
    assert bridge.handleClientMessage(json.dumps(['Stop']))['type'] == "Error"
    assert bridge.commandQueue.empty()

    assert bridge.handleClientMessage(json.dumps({'type': 'Stop'})) is None
    assert bridge.commandQueue.get_nowait() == {'type': 'Stop'}


def test_stop_from_client_ends_the_run(bridge):
    bridge.handleClientMessage(json.dumps({'type': 'Stop'}))
    state = bridge.reconstructor.run()
    assert state.epoch == 0

    messages = []
    while not bridge.statusQueue.empty():
        messages.append(bridge.statusQueue.get_nowait())
    assert messages[-1] == {'type': 'Finished', 'data': {'epoch': 0, 'stopped': True}}


def test_ws_json():
    assert json.loads(ws_json({'type': 'EpochDone', 'data': {'epoch': 1, 'ssimPhase': None}})) == {'type': 'EpochDone', 'data': {'epoch': 1, 'ssimPhase': None}}


def test_websocket_status_and_broadcast(bridge):
    with TestClient(create_app(bridge)) as client:
        with client.websocket_connect('/monitor_ws') as ws:
            status = ws.receive_json()
            assert status['type'] == 'status'
            assert status['data']['epochs'] == 5
            assert status['data']['numPatterns'] == 4

            ws.send_text("hello")
            assert ws.receive_json()['type'] == 'Error'

            bridge.reconstructor.sendReconstructorMsg({'type': 'Checkpoint', 'data': {'epoch': 0}})
            assert ws.receive_json() == {'type': 'Checkpoint', 'data': {'epoch': 0}}

            ws.send_text(json.dumps({'type': 'Stop'}))

        # the Stop travels through the input queue
        assert bridge.reconstructor.run().epoch == 0


def test_status_queue_keeps_the_newest_messages(bridge):
    for epoch in range(STATUS_QUEUE_SIZE + 5):
        bridge.reconstructor.sendReconstructorMsg({'type': 'EpochDone', 'data': {'epoch': epoch}})

    assert bridge.statusQueue.qsize() == STATUS_QUEUE_SIZE
    assert bridge.statusQueue.get_nowait()['data']['epoch'] == 5

    small = DropOldestQueue(2)
    for item in 'abc':
        small.put(item)
    assert [small.get_nowait(), small.get_nowait()] == ['b', 'c']


def test_stop_event_shuts_the_server_down():
    server = SimpleNamespace(should_exit=False)
    stopEvent = threading.Event()
    watcher = exitOnStop(server, stopEvent)
    assert server.should_exit is False

    stopEvent.set()
    watcher.join(timeout=2.0)
    assert not watcher.is_alive()
    assert server.should_exit is True
