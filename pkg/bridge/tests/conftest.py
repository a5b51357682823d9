import threading
from pathlib import Path

import pytest

from victim_bridge.server import BridgeServer

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture
def live_server():
    servers = []

    def start(adapter):
        server = BridgeServer(adapter, port=0)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES
