import time
from contextlib import contextmanager

ACCEPTANCE: dict = {}


@contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for an acceptance criterion; ``info`` collects the
    numbers shown in the terminal summary."""
    info: dict = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException:
        ACCEPTANCE[number] = ("FAIL", title, info, time.perf_counter() - t0)
        raise
    ACCEPTANCE[number] = ("PASS", title, info, time.perf_counter() - t0)


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, info, secs = ACCEPTANCE[n]
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in info.items())
        terminalreporter.write_line(f"[{status}] criterion {n}: {title} ({secs:.1f}s) {detail}")
