from threading import Lock
from fedvfda.transport import TransportBackendBase
from fedvfda.errors import TransportError


class LoopbackBackend(TransportBackendBase):
    """In-process transport keeping messages in memory."""

    def open(self) -> None:
        self._lock = Lock()
        self._broadcasts = {}
        self._updates = {}
        super().open()

    def close(self) -> None:
        super().close()
        self._broadcasts = {}
        self._updates = {}

    def send_broadcast(self, round_: int, data: bytes) -> None:
        self.check_open()
        with self._lock:
            self._broadcasts[round_] = bytes(data)

    def receive_broadcast(self, round_: int) -> bytes:
        self.check_open()
        with self._lock:
            try:
                return self._broadcasts[round_]
            except KeyError:
                raise TransportError(f"No broadcast has been sent for round {round_}")

    def send_update(self, round_: int, client_id: int, data: bytes) -> None:
        self.check_open()
        with self._lock:
            round_updates = self._updates.setdefault(round_, {})
            if client_id in round_updates:
                raise TransportError(
                    f"Client {client_id} already sent an update for round {round_}"
                )
            round_updates[client_id] = bytes(data)

    def collect_updates(self, round_: int) -> list[bytes]:
        self.check_open()
        with self._lock:
            round_updates = self._updates.pop(round_, {})
            # the previous round's broadcast is no longer needed
            self._broadcasts.pop(round_ - 1, None)
        return [round_updates[client_id] for client_id in sorted(round_updates)]


backend_class = LoopbackBackend
