import socket
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from bbuda import teacher as teacher_mod
from bbuda.checkpoint import Checkpoint, save_checkpoint
from bbuda.probmap import ProbMap
from bbuda.segnet import SegNetConfig, init_parameters
from bbuda.synthdata import SOURCE_SPEC, SegSample, generate_domain
from bbuda.teacher import (ERR_BAD_INPUT, ERR_CHECKSUM, ERROR, HEALTH, HEALTH_OK, PREDICT, PROBMAP,
                           InProcessTeacher, MalformedResponseError, RemoteError, RemoteTeacher,
                           TeacherConnectionError, TeacherEndpoint, TeacherServer, TeacherTimeoutError,
                           decode_array, encode_array, encode_frame, read_frame)
from bbuda.trainer import TrainRunConfig, train_source


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("teacher") / "t.ckpt"
    save_checkpoint(Checkpoint.from_net(init_parameters(SegNetConfig(), seed=4)), path)
    return path


@pytest.fixture(scope="module")
def server(ckpt_path):
    srv = TeacherServer(ckpt_path, ("127.0.0.1", 0))
    srv.start_background()
    yield srv
    srv.stop()


def _images(n, seed=0, size=32):
    rng = np.random.default_rng(seed)
    return [rng.random((1, 4, size, size)).astype(np.float32) for _ in range(n)]


def _raw_conn(server):
    return socket.create_connection(("127.0.0.1", server.port), timeout=5)


def test_health_reports_version_and_classes(server):
    with RemoteTeacher("127.0.0.1", server.port) as t:
        assert t.health() == {"version": 1, "num_classes": 4}


def test_health_payload_carries_nothing_else(server):
    with _raw_conn(server) as s:
        s.sendall(encode_frame(HEALTH, b""))
        ftype, payload = read_frame(s)
    assert ftype == HEALTH_OK and struct.unpack("<HH", payload) == (1, 4)


def test_remote_matches_in_process(server, ckpt_path):
    local = InProcessTeacher(ckpt_path)
    with RemoteTeacher("127.0.0.1", server.port) as remote:
        for x in _images(50):
            a, b = local.predict(x).values, remote.predict(x).values
            assert np.max(np.abs(a - b)) <= 1e-6


def test_in_process_is_bitwise_deterministic(ckpt_path):
    t = InProcessTeacher(ckpt_path)
    x = _images(1)[0]
    assert t.predict(x) == t.predict(x)


def test_probmap_wire_round_trip_is_bit_exact():
    rng = np.random.default_rng(1)
    v = rng.dirichlet(np.ones(4), size=(5, 7)).transpose(2, 0, 1).astype(np.float32)
    back = decode_array(encode_array(v))
    assert back.tobytes() == v.tobytes()


def test_corrupted_checksum_gets_error_and_connection_survives(server):
    frame = bytearray(encode_frame(PREDICT, encode_array(_images(1, size=8)[0][0])))
    frame[-1] ^= 0xFF
    with _raw_conn(server) as s:
        s.sendall(bytes(frame))
        ftype, payload = read_frame(s)
        assert ftype == ERROR and struct.unpack_from("<H", payload)[0] == ERR_CHECKSUM
        s.sendall(encode_frame(HEALTH, b""))
        assert read_frame(s)[0] == HEALTH_OK


def test_bad_input_is_reported_not_fatal(server):
    with _raw_conn(server) as s:
        s.sendall(encode_frame(PREDICT, struct.pack("<HHH", 4, 2, 2) + b"\0" * 8))
        ftype, payload = read_frame(s)
        assert ftype == ERROR and struct.unpack_from("<H", payload)[0] == ERR_BAD_INPUT
        s.sendall(encode_frame(HEALTH, b""))
        assert read_frame(s)[0] == HEALTH_OK


def test_concurrent_clients_match_serial(server, ckpt_path):
    images = _images(10, seed=3, size=16)
    serial = [InProcessTeacher(ckpt_path).predict(x).values for x in images]

    def client(k):
        with RemoteTeacher("127.0.0.1", server.port) as t:
            for r in range(100):
                i = (k + r) % len(images)
                if np.max(np.abs(t.predict(images[i]).values - serial[i])) > 1e-6:
                    return False
        return True

    with ThreadPoolExecutor(16) as pool:
        assert all(pool.map(client, range(16)))


def test_client_rejects_probmap_that_does_not_sum_to_one():
    bad = np.full((4, 2, 2), 0.5, np.float32)

    def fake_server(sock):
        conn, _ = sock.accept()
        with conn:
            read_frame(conn)
            conn.sendall(encode_frame(PROBMAP, encode_array(bad)))

    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        sock.listen()
        th = threading.Thread(target=fake_server, args=(sock,))
        th.start()
        with pytest.raises(MalformedResponseError):
            RemoteTeacher("127.0.0.1", sock.getsockname()[1]).predict(np.zeros((1, 4, 2, 2), np.float32))
        th.join()


def test_client_rejects_corrupted_response():
    def fake_server(sock):
        conn, _ = sock.accept()
        with conn:
            read_frame(conn)
            frame = bytearray(encode_frame(PROBMAP, encode_array(np.full((2, 1, 1), 0.5, np.float32))))
            frame[-2] ^= 1
            conn.sendall(bytes(frame))

    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        sock.listen()
        th = threading.Thread(target=fake_server, args=(sock,))
        th.start()
        with pytest.raises(MalformedResponseError):
            RemoteTeacher("127.0.0.1", sock.getsockname()[1]).predict(np.zeros((1, 4, 1, 1), np.float32))
        th.join()


def test_server_errors_surface_as_remote_error(server):
    with RemoteTeacher("127.0.0.1", server.port) as t:
        ftype, payload = t._roundtrip(encode_frame(PREDICT, b"xx"))
        assert ftype == ERROR
        with pytest.raises(RemoteError) as err:
            t._raise_error(payload)
        assert err.value.code == ERR_BAD_INPUT


def test_non_finite_image_rejected_before_sending(server):
    with RemoteTeacher("127.0.0.1", server.port) as t:
        with pytest.raises(ValueError, match="non-finite"):
            t.predict(np.full((1, 4, 4, 4), np.nan, np.float32))


def test_timeout_after_retries(monkeypatch):
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        sock.listen(8)  # accepts connections, never answers
        monkeypatch.setenv(teacher_mod.TIMEOUT_ENV, "50")
        t = RemoteTeacher("127.0.0.1", sock.getsockname()[1], max_retries=1)
        assert t.timeout_ms == 50
        with pytest.raises(TeacherTimeoutError):
            t.health()


def test_connection_error_when_nobody_listens():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
    with pytest.raises(TeacherConnectionError):
        RemoteTeacher("127.0.0.1", port, timeout_ms=200, max_retries=1).health()


def test_spatial_limit_enforced_client_side(ckpt_path):
    with pytest.raises(ValueError, match="4096"):
        InProcessTeacher(ckpt_path).predict(np.zeros((1, 4, 4100, 2), np.float32))


def test_endpoint_api_surface_is_black_box():
    """Only predict (ProbMap), health (dict), close and context management are public."""
    for cls in (TeacherEndpoint, InProcessTeacher, RemoteTeacher):
        public = {n for n in dir(cls) if not n.startswith("_")}
        public -= {"from_address", "host", "port", "timeout_ms", "max_retries"}
        assert public == {"predict", "health", "close"}, cls
    for cls in (InProcessTeacher, RemoteTeacher):
        assert cls.predict.__annotations__["return"] in ("ProbMap", ProbMap)


def test_in_process_teacher_hides_network(ckpt_path):
    t = InProcessTeacher(ckpt_path)
    visible = {n: getattr(t, n) for n in dir(t) if not n.startswith("__") and not n.startswith("_InProcess")}
    from bbuda.segnet import SegNet
    assert not any(isinstance(v, SegNet) for v in visible.values())
    assert set(vars(t)) == {"_InProcessTeacher__net", "_InProcessTeacher__num_classes"}


def test_saturated_one_class_teacher(tmp_path):
    samples = [SegSample(s.image, np.full(s.label.shape, 2, np.uint8), s.id)
               for s in generate_domain(SOURCE_SPEC, 8)]
    cfg = TrainRunConfig(batch_size=4, total_iters=100, lr=3e-3,
                         net=SegNetConfig(base_width=4, depth=2))
    save_checkpoint(train_source(cfg, samples), tmp_path / "one.ckpt")
    t = InProcessTeacher(tmp_path / "one.ckpt")
    for s in generate_domain(SOURCE_SPEC, 4, start=100):
        assert np.mean(t.predict(s.image).argmax() == 2) > 0.99


def test_frame_crc_covers_type_and_payload():
    frame = encode_frame(HEALTH, b"")
    assert struct.unpack_from("<I", frame)[0] == len(frame) - 4
    assert struct.unpack("<I", frame[-4:])[0] == zlib.crc32(bytes([HEALTH]))
