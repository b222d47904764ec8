"""Per-criterion outcomes collected by the acceptance suite and printed in the terminal summary."""

RESULTS = {}


def record(number, ok, detail):
    RESULTS[number] = (bool(ok), detail)
    line = f"acceptance criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    return line
