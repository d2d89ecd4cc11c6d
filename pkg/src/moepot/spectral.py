"""Public 2D DFT surface on H x W x C fields, plus the spectrum container."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError
from .tensor import Tensor, dft2, idft2_real, transpose, _as_tensor


@dataclass
class ComplexSpectrum:
    """Frequency-domain representation of a real field, stored as a real pair."""

    real_part: Tensor
    imag_part: Tensor

    def __post_init__(self):
        if self.real_part.shape != self.imag_part.shape:
            raise ContractError("real_part and imag_part must share a shape")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real_part.shape


def dft2_forward(field: Tensor) -> ComplexSpectrum:
    """Unnormalized forward DFT of a [H, W, C] real field, per channel.

    S[k1, k2] = sum_{x,y} field[x, y] * exp(-2*pi*i*(k1*x/H + k2*y/W)).
    """
    field = _as_tensor(field)
    if field.data.ndim != 3:
        raise ContractError("dft2_forward expects a [H, W, C] field")
    chw = transpose(field, (2, 0, 1))
    re, im = dft2(chw)
    return ComplexSpectrum(transpose(re, (1, 2, 0)), transpose(im, (1, 2, 0)))


def dft2_inverse(spectrum: ComplexSpectrum) -> Tensor:
    """Exact inverse of dft2_forward; rejects non-conjugate-symmetric input."""
    re = transpose(spectrum.real_part, (2, 0, 1))
    im = transpose(spectrum.imag_part, (2, 0, 1))
    field = idft2_real(re, im, strict=True)
    return transpose(field, (1, 2, 0))
