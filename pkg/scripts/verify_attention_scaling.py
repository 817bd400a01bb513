import os
import sys

# Add app to path
sys.path.append(os.getcwd())

from app.services.oracles import LINEAR_MAX_EXPONENT, QUADRATIC_MIN_EXPONENT, measure_scaling


def verify_scaling():
    result = measure_scaling()

    print(f"{'Map':<8} | {'Tokens':<7} | {'Linear (ms)':<12} | {'Quadratic (ms)':<14} | {'Ratio':<8}")
    print("-" * 62)
    for row in result["table"]:
        ratio = row["quadratic_s"] / row["linear_s"]
        side = f"{row['side']}x{row['side']}"
        print(f"{side:<8} | {row['tokens']:<7} | {row['linear_s'] * 1e3:<12.2f} | "
              f"{row['quadratic_s'] * 1e3:<14.2f} | {ratio:<8.1f}")

    lin, quad = result["linear_exponent"], result["quadratic_exponent"]
    print()
    print(f"Fitted exponent, linear:    {lin:.2f} (must be < {LINEAR_MAX_EXPONENT})")
    print(f"Fitted exponent, quadratic: {quad:.2f} (must be > {QUADRATIC_MIN_EXPONENT})")
    return lin < LINEAR_MAX_EXPONENT and quad > QUADRATIC_MIN_EXPONENT


if __name__ == "__main__":
    sys.exit(0 if verify_scaling() else 1)
