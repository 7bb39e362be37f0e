"""Per-criterion pass/fail registry printed at the end of the pytest session."""
from __future__ import annotations

import time
from contextlib import contextmanager

RESULTS: dict[int, dict] = {}
TITLES = {
    1: "focal loss equals CE at alpha=1, gamma=0; FL(0.9) = 2.6341e-4",
    2: "gradients match central differences (head logits, 20 model params)",
    3: "IoU / encode-decode / NMS against exact references",
    4: "anchor assignment against brute-force double loop",
    5: "head channel counts K*A, 4*A, Z*A and row alignment",
    6: "ROC-AUC against brute-force pair counting",
    7: "shapes-tiny end to end: micro AUC >= 0.90, recall@0.5 >= 0.80",
    8: "lambda_attr=0 isolates the attribute head; lambda_attr=1 gains >= 0.30 AUC",
    9: "plateau schedule traces",
    10: "apascal-paper profile golden file; aPascal split counts",
}


@contextmanager
def criterion(number: int, max_seconds: float | None = None):
    """Record the outcome of one criterion. Yields a dict for extra notes."""
    entry = {"status": "FAIL", "notes": []}
    RESULTS[number] = entry
    t0 = time.perf_counter()
    try:
        yield entry
        elapsed = time.perf_counter() - t0
        entry["seconds"] = elapsed
        if max_seconds is not None and elapsed > max_seconds:
            entry["notes"].append(f"runtime {elapsed:.1f}s exceeds {max_seconds:g}s")
            raise AssertionError(f"criterion {number} took {elapsed:.1f}s > {max_seconds:g}s")
        entry["status"] = "PASS"
    except BaseException as e:
        entry["seconds"] = time.perf_counter() - t0
        if not entry["notes"]:
            entry["notes"].append(str(e).splitlines()[0][:160] if str(e) else type(e).__name__)
        raise


def summary_lines() -> list[str]:
    lines = []
    for n in sorted(TITLES):
        r = RESULTS.get(n)
        if r is None:
            lines.append(f"criterion {n:2d}  NOT RUN  {TITLES[n]}")
            continue
        notes = "; ".join(r["notes"])
        lines.append(f"criterion {n:2d}  {r['status']:<4}  {TITLES[n]}  "
                     f"[{r['seconds']:.1f}s]{'  ' + notes if notes else ''}")
    return lines
