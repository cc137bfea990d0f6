"""Largest stable explicit step size on the standard probe family and on the content-only quadratic."""
from mpsi.solver import probe_family, stability_probe
from mpsi.style_loss import LossCoeffs


def main():
    top = stability_probe(probe_family())
    print(f"standard family (4x4, d=8, k=2, levels=2): max stable dt {top:.4f}; descent guaranteed at {top / 2:.4f}")
    lam_c = 0.01
    quad = stability_probe(probe_family(2, coeffs=LossCoeffs(0.0, lam_c, 0.0, 1e-3), masked=False))
    print(f"content-only quadratic: probe {quad:.2f}, analytic P/lambda_c = {16 / lam_c:.2f}")


if __name__ == "__main__":
    main()
