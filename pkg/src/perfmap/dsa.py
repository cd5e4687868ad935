"""Digitally subtracted angiogram from co-registered CTA and plain CT."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError
from .volume import ScalarVolume, check_compatible


def subtract_normalize(cta: ScalarVolume, ct: ScalarVolume) -> ScalarVolume:
    """Return ``max(cta - ct, 0) / max(cta - ct)``.

    Negative differences are clamped before normalisation, so the result
    lies in [0, 1] with the maximum attained. The output is float32 on the
    CTA grid.
    """
    check_compatible(cta, ct)
    diff = np.asarray(cta.data, dtype=np.float64) - np.asarray(ct.data, dtype=np.float64)
    np.maximum(diff, 0.0, out=diff)
    peak = diff.max()
    if not peak > 0:
        raise DegenerateInputError(
            "CTA is nowhere brighter than CT; no contrast to normalise"
        )
    return cta.with_data((diff / peak).astype(np.float32))
