"""Positional schemes: additive sinusoidal encodings and the multiplicative
power-law position coefficient (AGF)."""

from __future__ import annotations

import numpy as np

from .config import ConfigError, PosKind, PosScheme
from .tensor import Tensor, add


def sinusoidal_pe(seq_len: int, d_model: int, offset: int = 0) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same)."""
    if seq_len <= 0:
        raise ValueError("seq_len must be positive")
    if d_model <= 0 or d_model % 2:
        raise ValueError(f"sinusoidal encoding needs an even d_model, got {d_model}")
    pos = np.arange(offset, offset + seq_len, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((seq_len, d_model))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


def agf_pos_coeff(seq_len: int, scheme: PosScheme, seq_kv: int | None = None,
                  q_offset: int = 0) -> np.ndarray:
    """PosCoeff(m, n) = (1 + |m - n|)^(-alpha).

    Queries sit at positions ``q_offset .. q_offset + seq_len - 1`` and keys at
    ``0 .. seq_kv - 1`` (``seq_kv`` defaults to ``seq_len``).
    """
    if scheme.kind is not PosKind.AGF:
        raise ConfigError(f"agf_pos_coeff needs an AGF scheme, got {scheme.kind.value}")
    seq_kv = seq_len if seq_kv is None else seq_kv
    m = np.arange(q_offset, q_offset + seq_len)[:, None]
    n = np.arange(seq_kv)[None, :]
    return (1.0 + np.abs(m - n)) ** (-scheme.agf_alpha)


def apply_positions(x_q: Tensor, x_kv: Tensor, scheme: PosScheme, add_pe: bool = True):
    """Returns ``(x_q, x_kv, pos_coeff)``.

    SINUSOIDAL adds the encoding to both inputs (when ``add_pe``); AGF leaves
    inputs untouched and returns the coefficient matrix for the attention
    kernel; NONE returns everything unchanged.
    """
    if scheme.kind is PosKind.SINUSOIDAL:
        if add_pe:
            tq, tkv, d = x_q.shape[-2], x_kv.shape[-2], x_q.shape[-1]
            same = x_q is x_kv
            x_q = add(x_q, sinusoidal_pe(tq, d))
            x_kv = x_q if same else add(x_kv, sinusoidal_pe(tkv, d))
        return x_q, x_kv, None
    if scheme.kind is PosKind.AGF:
        return x_q, x_kv, agf_pos_coeff(x_q.shape[-2], scheme, x_kv.shape[-2])
    return x_q, x_kv, None
