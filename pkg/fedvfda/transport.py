import warnings
from logging import getLogger
from pathlib import Path
from types import ModuleType, TracebackType
from importlib import import_module
from django.conf import settings
from .errors import TransportError


log = getLogger("main")


DEFAULT_TRANSPORT = {"ENGINE": "fedvfda.transports.loopback"}


def get_transport(engine_name: str) -> ModuleType:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            return import_module(engine_name)
        except ImportError as e:
            raise TransportError(
                f'Transport backend "{engine_name}" not found or failed to import: {e}'
            ) from e


def get_transport_from_options(options: dict) -> ModuleType:
    engine_name = options.get("ENGINE")
    if not engine_name:
        raise TransportError("Transport options do not have an ENGINE defined")
    module = get_transport(engine_name)
    if not hasattr(module, "backend_class"):
        raise TransportError(
            f'Transport backend "{engine_name}" does not define a backend_class'
        )
    return module


def get_transport_options() -> dict:
    return dict(getattr(settings, "FEDVFDA_TRANSPORT", DEFAULT_TRANSPORT))


def load_transport(
    options: dict | None = None, scope: str | None = None
) -> "TransportBackendBase":
    """Instantiates settings.FEDVFDA_TRANSPORT, or the given options. A scope keeps
    concurrent runs apart by nesting a configured DIRECTORY option."""
    if options is None:
        options = get_transport_options()
    options = dict(options)
    if scope and options.get("DIRECTORY"):
        options["DIRECTORY"] = str(Path(options["DIRECTORY"]) / scope)
    module = get_transport_from_options(options)
    return module.backend_class(options)


class TransportBackendBase(object):
    """Generic base class for all transports, mostly an interface / template. A
    transport moves serialized protocol messages between the server and clients, it
    never looks inside them."""

    REQUIRED_OPTIONS = ("ENGINE",)

    def __init__(self, options: dict) -> None:
        self.options = options
        self._open = False
        self.validate_options()

    def validate_options(self) -> None:
        for o in self.REQUIRED_OPTIONS:
            if o not in self.options:
                raise TransportError(
                    f"Missing required option for the message transport backend: {o}"
                )

    def __enter__(self) -> "TransportBackendBase":
        self.open()
        return self

    def __exit__(
        self,
        type_: type[BaseException] | None,
        value: BaseException | None,
        traceback: TracebackType | None,
    ) -> bool | None:
        self.close()

    def open(self) -> None:
        self._open = True

    def close(self) -> None:
        self._open = False

    def check_open(self) -> None:
        if not self._open:
            raise TransportError(
                "Transport is not open, please call open() before sending messages"
            )

    def send_broadcast(self, round_: int, data: bytes) -> None:
        raise NotImplementedError("send_broadcast() must be implemented")

    def receive_broadcast(self, round_: int) -> bytes:
        raise NotImplementedError("receive_broadcast() must be implemented")

    def send_update(self, round_: int, client_id: int, data: bytes) -> None:
        raise NotImplementedError("send_update() must be implemented")

    def collect_updates(self, round_: int) -> list[bytes]:
        raise NotImplementedError("collect_updates() must be implemented")
