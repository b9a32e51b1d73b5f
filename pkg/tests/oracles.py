"""Independent reference computations shared by several test modules."""

from decimal import Decimal, localcontext


def decimal_log_covering(M, L, K, D, kappa1, kappa2, delta):
    """Oracle: the covering bound assembled in plain high-precision arithmetic, logged only at the end."""
    with localcontext() as ctx:
        ctx.prec = 80
        k1, k2, dl = Decimal(repr(kappa1)), Decimal(repr(kappa2)), Decimal(repr(delta))
        one = Decimal(1)
        base = 4 * D * K * k1
        rho = base ** L
        rho_tilde = (one + rho) ** M
        rho_plus = max(one, base) ** L
        rho_tilde_plus = one + M * L * rho_plus
        lam1 = (8 * M + 12) * D * D * max(one, k2) * max(one, k1) * rho_tilde * rho_tilde_plus
        lam2 = M * L * (16 * D * D * K + 4 * D) + 4 * D * D + 1
        return lam2, lam2 * (2 * max(k1, k2) * lam1 / dl).ln()
