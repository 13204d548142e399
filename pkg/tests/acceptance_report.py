"""Collects one verdict per acceptance criterion for the end-of-run summary."""
RESULTS: dict = {}


def record(number: int, ok: bool, detail: str):
    RESULTS[number] = (ok, detail)
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line, flush=True)
    return ok
