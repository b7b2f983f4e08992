"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

RESULTS = {}


def record(number, passed, detail):
    RESULTS[number] = (bool(passed), detail)
    line = format_line(number)
    print(line)
    return line


def format_line(number):
    passed, detail = RESULTS[number]
    return f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
