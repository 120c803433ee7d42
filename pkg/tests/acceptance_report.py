"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

RESULTS: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    return ok
