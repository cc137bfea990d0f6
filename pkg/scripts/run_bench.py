"""Run the single / linear / mixed comparison and print the summary.

    python3 scripts/run_bench.py [--tasks 20] [--angle 120] [--learned] [--out out/bench]
"""
import argparse
from pathlib import Path

from mpsi.bench import BenchSettings, benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tasks", type=int, default=20)
    ap.add_argument("--angle", type=float, default=120.0)
    ap.add_argument("--learned", action="store_true", help="learn the blend field instead of using user masks")
    ap.add_argument("--out", default="out/bench")
    args = ap.parse_args()

    rep = benchmark(BenchSettings(tasks=args.tasks, angle_deg=args.angle, learned_weights=args.learned))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(rep.to_csv(include_timing=True))
    (out / "bench_summary.json").write_text(rep.summary_json(include_timing=True) + "\n")
    s = rep.summary
    for name in ("single", "linear", "mixed"):
        print(f"{name:7s} regional {s['mean_regional_alignment'][name]:.4f}  "
              f"joint {s['mean_joint_alignment'][name]:.4f}  {s['mean_wall_ms'][name]:.1f} ms")
    print(f"mixed > linear on {s['win_rate_mixed_over_linear']:.0%}, linear >= single on "
          f"{s['win_rate_linear_over_single']:.0%}, counterexamples {s['ordering_counterexamples']}")


if __name__ == "__main__":
    main()
