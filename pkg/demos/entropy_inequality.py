"""Why conditional coding can beat residual coding, on exact discrete sources.

For a joint distribution of the current sample x_t and its prediction x_c the
checker enumerates H(x_t), H(x_t - x_c) and H(x_t | x_c). The conditional
entropy never exceeds either of the others; the residual can even cost more
than coding x_t alone when the prediction is unrelated to it.
"""

import numpy as np

from condvc.evaluation import empirical_entropy_check


def show(name: str, joint: np.ndarray, **kw):
    t = empirical_entropy_check(joint, **kw)
    print(f"{name:<34}{t.h_x:>9.4f}{t.h_residual:>13.4f}{t.h_conditional:>15.4f}")


def main():
    print(f"{'source':<34}{'H(x_t)':>9}{'H(x_t-x_c)':>13}{'H(x_t|x_c)':>15}")
    show("independent uniform on {0..3}", np.full((4, 4), 1 / 16))
    show("perfect predictor", np.diag([0.1, 0.2, 0.3, 0.4]))

    # x_c = x_t + e with e in {-1, 0, 1}: residual coding pays for e, conditional coding too
    n = 8
    p = np.zeros((n, n + 2))
    for x in range(n):
        for e, pe in ((-1, 0.25), (0, 0.5), (1, 0.25)):
            p[x, x + e + 1] = pe / n
    show("additive noise, clipped range", p, xt_values=np.arange(n), xc_values=np.arange(-1, n + 1))

    # a predictor that is right but on a different scale: x_c = 2 x_t
    p = np.zeros((n, 2 * n))
    for x in range(n):
        p[x, 2 * x] = 1 / n
    show("scaled predictor x_c = 2 x_t", p, xt_values=np.arange(n), xc_values=np.arange(2 * n))

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(2000):
        a, b = rng.integers(2, 7, 2)
        q = rng.random((a, b)) ** 3
        q /= q.sum()
        t = empirical_entropy_check(q)
        worst = max(worst, t.h_conditional - min(t.h_x, t.h_residual))
    print(f"\n2000 random joints: max of H(x_t|x_c) - min(H(x_t), H(x_t-x_c)) = {worst:.2e}")


if __name__ == "__main__":
    main()
