"""Run only the acceptance criteria and print one PASS/FAIL line per criterion.

    python3 scripts/run_acceptance.py            # all ten, about four minutes on one core
    python3 scripts/run_acceptance.py -k "01 or 08"
"""

import pathlib
import sys

import pytest

if __name__ == "__main__":
    root = pathlib.Path(__file__).resolve().parent.parent
    sys.exit(pytest.main([str(root / "tests" / "test_acceptance.py"), "-q", *sys.argv[1:]]))
