"""Collects one pass/fail line per acceptance criterion for the run summary."""

RESULTS: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, passed: bool, detail: str) -> str:
    RESULTS[number] = (passed, title, detail)
    line = format_line(number)
    print(line)
    return line


def format_line(number: int) -> str:
    passed, title, detail = RESULTS[number]
    return f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"
