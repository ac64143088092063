"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

_results: dict = {}


def record(key: str, ok: bool, detail: str) -> bool:
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    _results[key] = line
    print(line)
    return ok


def lines() -> list[str]:
    def order(key):
        num = "".join(ch for ch in key if ch.isdigit())
        return int(num), key
    return [_results[k] for k in sorted(_results, key=order)]
