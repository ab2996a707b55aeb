# tagged one-line messages on stderr: "[tag] msg", "[tag] WARN: msg", "[tag] ERR: msg"
import os, sys

QUIET = os.environ.get("LORUN_QUIET", "").lower() in {"1", "true", "yes", "on"}


def set_quiet(flag: bool) -> None:
    global QUIET
    QUIET = bool(flag)


def info(tag: str, msg: str) -> None:
    if not QUIET:
        print(f"[{tag}] {msg}", file=sys.stderr)


def warn(tag: str, msg: str) -> None:
    print(f"[{tag}] WARN: {msg}", file=sys.stderr)


def error(tag: str, msg: str) -> None:
    print(f"[{tag}] ERR: {msg}", file=sys.stderr)
