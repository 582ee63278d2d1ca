import tempfile
from pathlib import Path
from django.test import SimpleTestCase, override_settings
from fedvfda.transport import (
    load_transport,
    get_transport_options,
    TransportBackendBase,
)
from fedvfda.transports.loopback import LoopbackBackend
from fedvfda.transports.spool import SpoolBackend
from fedvfda.errors import TransportError


class TransportLoadingTestSuite(SimpleTestCase):
    def test_default_from_settings(self):
        self.assertEqual(
            get_transport_options(), {"ENGINE": "fedvfda.transports.loopback"}
        )
        self.assertIsInstance(load_transport(), LoopbackBackend)

    @override_settings(
        FEDVFDA_TRANSPORT={
            "ENGINE": "fedvfda.transports.spool", "DIRECTORY": "/tmp/spool"
        }
    )
    def test_settings_override(self):
        transport = load_transport(scope="seed_3")
        self.assertIsInstance(transport, SpoolBackend)
        self.assertEqual(
            Path(transport.options["DIRECTORY"]), Path("/tmp/spool/seed_3")
        )

    def test_scope_without_directory(self):
        transport = load_transport(
            {"ENGINE": "fedvfda.transports.spool"}, scope="seed_3"
        )
        self.assertNotIn("DIRECTORY", transport.options)

    def test_errors(self):
        with self.assertRaises(TransportError):
            load_transport({})
        with self.assertRaises(TransportError):
            load_transport({"ENGINE": "fedvfda.transports.missing"})
        with self.assertRaises(TransportError):
            # importable, but not a transport backend
            load_transport({"ENGINE": "fedvfda.errors"})

    def test_base_is_abstract(self):
        with TransportBackendBase({"ENGINE": "test"}) as transport:
            with self.assertRaises(NotImplementedError):
                transport.send_broadcast(1, b"")
            with self.assertRaises(NotImplementedError):
                transport.collect_updates(1)
        with self.assertRaises(TransportError):
            TransportBackendBase({})


class TransportBehaviourMixin:
    def make_transport(self):
        raise NotImplementedError

    def test_round_trip(self):
        with self.make_transport() as transport:
            transport.send_broadcast(1, b"global")
            self.assertEqual(transport.receive_broadcast(1), b"global")
            for client_id in (2, 0, 10, 1):
                transport.send_update(1, client_id, f"client {client_id}".encode())
            self.assertEqual(
                transport.collect_updates(1),
                [b"client 0", b"client 1", b"client 2", b"client 10"],
            )

    def test_missing_broadcast(self):
        with self.make_transport() as transport:
            with self.assertRaises(TransportError):
                transport.receive_broadcast(1)

    def test_duplicate_update(self):
        with self.make_transport() as transport:
            transport.send_broadcast(1, b"global")
            transport.send_update(1, 0, b"first")
            with self.assertRaises(TransportError):
                transport.send_update(1, 0, b"second")

    def test_closed(self):
        transport = self.make_transport()
        with self.assertRaises(TransportError):
            transport.send_broadcast(1, b"global")

    def test_empty_round(self):
        with self.make_transport() as transport:
            transport.send_broadcast(1, b"global")
            self.assertEqual(transport.collect_updates(1), [])


class LoopbackTestSuite(TransportBehaviourMixin, SimpleTestCase):
    def make_transport(self):
        return load_transport({"ENGINE": "fedvfda.transports.loopback"})

    def test_collect_clears_round(self):
        with self.make_transport() as transport:
            transport.send_broadcast(1, b"one")
            transport.send_update(1, 0, b"update")
            transport.collect_updates(1)
            self.assertEqual(transport.collect_updates(1), [])
            transport.send_broadcast(2, b"two")
            transport.collect_updates(2)
            with self.assertRaises(TransportError):
                transport.receive_broadcast(1)
            self.assertEqual(transport.receive_broadcast(2), b"two")


class SpoolTestSuite(TransportBehaviourMixin, SimpleTestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.directory = Path(self.tmpdir.name) / "spool"

    def tearDown(self):
        self.tmpdir.cleanup()

    def make_transport(self):
        return load_transport(
            {"ENGINE": "fedvfda.transports.spool", "DIRECTORY": str(self.directory)}
        )

    def test_files(self):
        with self.make_transport() as transport:
            transport.send_broadcast(3, b"global")
            transport.send_update(3, 1, b"update")
        self.assertEqual(
            (self.directory / "round_3" / "broadcast.fvm").read_bytes(), b"global"
        )
        self.assertEqual(
            (self.directory / "round_3" / "client_1.fvm").read_bytes(), b"update"
        )
        self.assertEqual(list(self.directory.glob("**/*.part")), [])

    def test_stale_round_removed(self):
        with self.make_transport() as transport:
            transport.send_broadcast(1, b"interrupted")
            transport.send_update(1, 0, b"stale")
        with self.make_transport() as transport:
            with self.assertLogs("main", level="WARNING"):
                transport.send_broadcast(1, b"resumed")
            self.assertEqual(transport.receive_broadcast(1), b"resumed")
            self.assertEqual(transport.collect_updates(1), [])

    def test_temporary_directory(self):
        transport = load_transport({"ENGINE": "fedvfda.transports.spool"})
        with transport:
            directory = transport.directory
            transport.send_broadcast(1, b"global")
            self.assertTrue(directory.is_dir())
        self.assertFalse(directory.exists())
