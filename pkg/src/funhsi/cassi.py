"""CASSI optical forward model and its shift-back initialization.

A scene cube X [H, W, Nband] passes a coded aperture (elementwise mask),
a prism shifts band n right by d[n] columns, and the detector sums bands
into a single 2-D measurement. shift_back undoes the dispersion on the
measurement to form the network input. Everything here is plain numpy,
gradients never flow through the simulator.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, ShapeError


@dataclass(frozen=True)
class DispersionSpec:
    """Integer per-band column shift: band n moves step*n pixels right."""

    step: int = 1

    def __post_init__(self):
        if self.step < 0:
            raise ContractError("dispersion step must be >= 0, got %d" % self.step)

    def shifts(self, n_bands):
        if n_bands < 1:
            raise ContractError("need at least one band")
        return np.arange(n_bands, dtype=np.int64) * self.step


@dataclass
class Measurement:
    """Detector image [H, W + max shift] plus the noise level used."""

    values: np.ndarray
    sigma: float = 0.0


def _values(y):
    return np.asarray(getattr(y, "values", y))


def modulate(x, m):
    """Apply the coded aperture to every band: out[:,:,n] = m * x[:,:,n]."""
    x = np.asarray(x)
    m = np.asarray(m)
    if x.ndim != 3:
        raise ShapeError("cube must be [H,W,Nband], got %r" % (x.shape,))
    if m.shape != x.shape[:2]:
        raise ShapeError("mask %r does not match cube spatial extents %r" % (m.shape, x.shape[:2]))
    return x * m[:, :, None]


def disperse(x, d):
    """Shift band n right by d.shifts[n] columns into a widened cube."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError("cube must be [H,W,Nband], got %r" % (x.shape,))
    h, w, n_bands = x.shape
    sh = d.shifts(n_bands)
    out = np.zeros((h, w + int(sh[-1]), n_bands), dtype=x.dtype)
    for n in range(n_bands):
        out[:, sh[n] : sh[n] + w, n] = x[:, :, n]
    return out


def integrate(x, sigma=0.0, seed=0):
    """Sum bands onto the detector and add Gaussian read noise."""
    x = np.asarray(x)
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    y = x.sum(axis=2)
    if sigma > 0:
        rng = np.random.default_rng(seed)
        y = y + rng.normal(0.0, sigma, size=y.shape).astype(y.dtype)
    return Measurement(values=y, sigma=float(sigma))


def forward(x, m, d, sigma=0.0, seed=0):
    """Full optical chain: mask, dispersion, detector integration."""
    return integrate(disperse(modulate(x, m), d), sigma=sigma, seed=seed)


def shift_back(y, d, n_bands):
    """Undo dispersion on the measurement: out[:,:,n] = y[:, shift[n] : shift[n]+W].

    The scene width is inferred from the measurement width minus the
    maximal shift.
    """
    y = _values(y)
    if y.ndim != 2:
        raise ShapeError("measurement must be 2-d, got %r" % (y.shape,))
    sh = d.shifts(n_bands)
    w = y.shape[1] - int(sh[-1])
    if w <= 0:
        raise ShapeError(
            "measurement width %d cannot hold max shift %d" % (y.shape[1], int(sh[-1]))
        )
    out = np.empty((y.shape[0], w, n_bands), dtype=y.dtype)
    for n in range(n_bands):
        out[:, :, n] = y[:, sh[n] : sh[n] + w]
    return out


def adjoint(y, m, d, n_bands):
    """Adjoint of the noiseless forward operator: mask times shift_back."""
    back = shift_back(y, d, n_bands)
    m = np.asarray(m)
    if m.shape != back.shape[:2]:
        raise ShapeError("mask %r does not match %r" % (m.shape, back.shape[:2]))
    return back * m[:, :, None]
