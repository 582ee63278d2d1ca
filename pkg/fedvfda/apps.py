from django.apps import AppConfig
from django.conf import settings
from django.core.exceptions import ImproperlyConfigured


class FedVfdaConfig(AppConfig):
    name = "fedvfda"

    def ready(self) -> None:
        """
        Validates the optional FEDVFDA_* settings at start-up.
        """
        transport = getattr(settings, "FEDVFDA_TRANSPORT", None)
        if transport is not None:
            if not isinstance(transport, dict):
                raise ImproperlyConfigured("settings.FEDVFDA_TRANSPORT must be a dict")
            if not transport.get("ENGINE"):
                raise ImproperlyConfigured(
                    'settings.FEDVFDA_TRANSPORT must define an "ENGINE"'
                )
        concurrency = getattr(settings, "FEDVFDA_CONCURRENCY", 1)
        if (
            isinstance(concurrency, bool)
            or not isinstance(concurrency, int)
            or concurrency < 1
        ):
            raise ImproperlyConfigured(
                f"settings.FEDVFDA_CONCURRENCY must be an integer >= 1, got {concurrency!r}"
            )
        defaults = getattr(settings, "FEDVFDA_DEFAULTS", {})
        if defaults is not None and not isinstance(defaults, dict):
            raise ImproperlyConfigured("settings.FEDVFDA_DEFAULTS must be a dict")
