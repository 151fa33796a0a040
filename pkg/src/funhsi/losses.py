"""Reconstruction loss and the combined training objective."""

from dataclasses import dataclass

from .tensor import DiffTensor, add, mul, sub, tmean, tsqrt

CHARBONNIER_EPS = 1e-3
DEFAULT_BALANCE = 5.0


def charbonnier(x_hat, x, eps=CHARBONNIER_EPS):
    """mean sqrt(diff^2 + eps^2); a smooth L1 whose floor at zero diff is eps."""
    d = sub(x_hat, x)
    return tmean(tsqrt(add(mul(d, d), eps * eps)))


@dataclass(frozen=True)
class LossReport:
    total: float
    recon: float
    reg: float
    cls: float
    ctr: float
    balance: float

    def as_row(self):
        return (
            "total=%.6f recon=%.6f reg=%.6f cls=%.6f ctr=%.6f lambda=%g"
            % (self.total, self.recon, self.reg, self.cls, self.ctr, self.balance)
        )


def total_loss(l_reg, l_cls, l_ctr, l_recon, balance=DEFAULT_BALANCE):
    """Detection terms plus balance * reconstruction; returns (scalar, report)."""
    det = add(add(l_reg, l_cls), l_ctr)
    total = add(det, mul(l_recon, balance))
    report = LossReport(
        total=total.item(),
        recon=l_recon.item(),
        reg=l_reg.item(),
        cls=l_cls.item(),
        ctr=l_ctr.item(),
        balance=balance,
    )
    return total, report
