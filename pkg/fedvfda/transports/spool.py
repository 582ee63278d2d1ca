import tempfile
from shutil import rmtree
from logging import getLogger
from pathlib import Path
from fedvfda.transport import TransportBackendBase
from fedvfda.errors import TransportError


log = getLogger("main")


class SpoolBackend(TransportBackendBase):
    """Transport writing every message to a file under a spool directory:

    <DIRECTORY>/round_<r>/broadcast.fvm
    <DIRECTORY>/round_<r>/client_<id>.fvm

    Without a DIRECTORY option a temporary directory is used and removed on close().
    Set KEEP to leave it behind.
    """

    def open(self) -> None:
        directory = self.options.get("DIRECTORY")
        self._temporary = directory is None
        if directory is None:
            directory = tempfile.mkdtemp(prefix="fedvfda-spool-")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        log.info(f"Spooling protocol messages to: {self.directory}")
        super().open()

    def close(self) -> None:
        super().close()
        if self._temporary and not self.options.get("KEEP", False):
            rmtree(self.directory, ignore_errors=True)

    def round_directory(self, round_: int) -> Path:
        return self.directory / f"round_{round_}"

    def _write(self, path: Path, data: bytes) -> None:
        if path.exists():
            raise TransportError(f"Spool file already exists: {path}")
        path.parent.mkdir(parents=True, exist_ok=True)
        partial = path.with_suffix(".part")
        partial.write_bytes(data)
        partial.rename(path)
        log.debug(f"Spooled {len(data)} bytes to: {path}")

    def send_broadcast(self, round_: int, data: bytes) -> None:
        self.check_open()
        round_directory = self.round_directory(round_)
        if round_directory.exists():
            # left behind by an interrupted run that is now being resumed
            log.warning(f"Removing stale spool directory: {round_directory}")
            rmtree(round_directory)
        self._write(round_directory / "broadcast.fvm", data)

    def receive_broadcast(self, round_: int) -> bytes:
        self.check_open()
        path = self.round_directory(round_) / "broadcast.fvm"
        try:
            return path.read_bytes()
        except OSError as e:
            raise TransportError(
                f"No broadcast has been spooled for round {round_}: {e}"
            ) from e

    def send_update(self, round_: int, client_id: int, data: bytes) -> None:
        self.check_open()
        self._write(self.round_directory(round_) / f"client_{client_id}.fvm", data)

    def collect_updates(self, round_: int) -> list[bytes]:
        self.check_open()
        paths = sorted(
            self.round_directory(round_).glob("client_*.fvm"),
            key=lambda p: int(p.stem.split("_", 1)[1]),
        )
        return [p.read_bytes() for p in paths]


backend_class = SpoolBackend
