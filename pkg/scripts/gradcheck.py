"""Finite-difference check of every gradient class over the 20-config suite."""
import sys
import time

from mpsi.gradcheck import CLASSES, run_suite, suite_configs


def main():
    t0 = time.perf_counter()
    res = run_suite(suite_configs(20), h=1e-4)
    for name in CLASSES:
        print(f"{name:7s} worst {res.worst[name]:.3e}")
    print(f"{res.cases} configs in {time.perf_counter() - t0:.1f}s: {'ok' if res.passed(1e-4) else 'FAIL'}")
    return 0 if res.passed(1e-4) else 1


if __name__ == "__main__":
    sys.exit(main())
