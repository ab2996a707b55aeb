#!/usr/bin/env python3
"""Entry point: python3 tools/lorun_cli.py <command> ... (PYTHONPATH="$PWD")."""
import sys

from lorun.cli import main

if __name__ == "__main__":
    sys.exit(main())
