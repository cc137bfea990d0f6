"""Wall-time ratio of the k=2 mixed pipeline to the k=1 single-prompt pipeline.

Reports the user-mask configuration (the acceptance setting) and the
learned-weight variant, each measured twice to show run-to-run spread.
"""
from mpsi.bench import overhead_probe


def main():
    for learned in (False, True):
        label = "learned weights" if learned else "user masks"
        a = overhead_probe(learned_weights=learned)
        b = overhead_probe(learned_weights=learned)
        print(f"{label:16s} ratio {a:.3f} / {b:.3f}  (spread {abs(a - b) / min(a, b):.1%})")


if __name__ == "__main__":
    main()
