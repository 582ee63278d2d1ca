#!/usr/bin/env python


import os
import sys


if __name__ == "__main__":
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "tests.settings")
    args = sys.argv[1:]
    if args and args[0] == "testsuite":
        # ./manage.py testsuite [--slow] [test labels]
        labels = [arg for arg in args[1:] if arg != "--slow"]
        if "--slow" in args:
            os.environ["FEDVFDA_SLOW_TESTS"] = "1"
        import django
        from django.conf import settings
        from django.test.utils import get_runner

        django.setup()
        TestRunner = get_runner(settings)
        test_runner = TestRunner(verbosity=2)
        failures = test_runner.run_tests(labels or ["tests"])
        sys.exit(bool(failures))
    else:
        try:
            from django.core.management import execute_from_command_line
        except ImportError as exc:
            raise ImportError("Error importing django, is it installed?") from exc
        execute_from_command_line(sys.argv)
