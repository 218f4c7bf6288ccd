"""Regularized least-squares linear Ambisonic encoder."""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atf import ATFSet
from .sphere import eval_real_sh, num_sh
from .stft import Spectrogram, StftConfig

__all__ = ["EncoderMatrix", "design_linear_encoder", "apply_encoder", "save_encoder", "load_encoder",
           "tikhonov_encoder"]

_ENC_MAGIC = b"AMBIENC1"


@dataclass
class EncoderMatrix:
    """Per-bin complex encoder ``E[f, sh, mic]``."""

    order: int
    frequencies: np.ndarray
    E: np.ndarray
    sample_rate: float
    latency: int = 0
    max_gain_db: float = 20.0
    diffuse_eq: bool = True
    regularization: np.ndarray | None = None
    saturated_bins: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.E = np.asarray(self.E, dtype=complex)
        if self.E.ndim != 3 or self.E.shape[0] != len(self.frequencies):
            raise ValueError("E must be [bins, sh, mics] with one row per frequency")
        if self.E.shape[1] != num_sh(self.order):
            raise ValueError(f"E has {self.E.shape[1]} SH rows, order {self.order} needs {num_sh(self.order)}")
        if not np.all(np.isfinite(self.E)):
            raise ValueError("encoder matrix contains non-finite values")

    @property
    def num_mics(self) -> int:
        return self.E.shape[2]

    def max_singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.E, compute_uv=False)[:, 0]


def tikhonov_encoder(U, s, A, lam):
    """``E = A diag(s / (s^2 + lam)) U^H`` for one bin."""
    return (A * (s / (s**2 + lam))) @ U.conj().T


def _design_bin(H, Ysw, sqrt_w, cap):
    """Smallest Tikhonov weight meeting the gain cap, returns ``(E, lam, saturated)``."""
    U, s, Vh = np.linalg.svd(H * sqrt_w, full_matrices=False)
    keep = s > s[0] * 1e-12
    U, s, Vh = U[:, keep], s[keep], Vh[keep]
    A = Ysw @ Vh.conj().T

    def gain(lam):
        return np.linalg.norm(tikhonov_encoder(U, s, A, lam), 2)

    if not np.isfinite(cap) or gain(0.0) <= cap:
        return tikhonov_encoder(U, s, A, 0.0), 0.0, False
    # ||E(lam)|| <= ||A|| / (2 sqrt(lam)) bounds the search interval
    hi = max((np.linalg.norm(A, 2) / (2 * cap)) ** 2, 1e-300)
    lo = hi * 1e-30
    saturated = False
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        if gain(mid) <= cap:
            hi = mid
        else:
            lo = mid
        if hi / lo < 1 + 1e-10:
            break
    E = tikhonov_encoder(U, s, A, hi)
    if not np.any(E):
        saturated = True
    return E, hi, saturated


def design_linear_encoder(atf: ATFSet, order: int = 1, max_gain_db: float = 20.0, diffuse_eq: bool = True,
                          stft_config: StftConfig | None = None, eq_band=(500.0, 2000.0)) -> EncoderMatrix:
    """Least-squares encoder per STFT bin with a singular-value gain cap.

    For each bin ``E = Y W H^H (H W H^H + lam I)^-1`` with ``lam`` the
    smallest value (found by bisection) for which ``sigma_max(E)`` does not
    exceed ``10**(max_gain_db/20)``. Pass ``max_gain_db=np.inf`` for the
    unregularized weighted pseudo-inverse.

    With ``diffuse_eq`` every SH row is scaled so that its diffuse-field
    response (grid-weighted RMS of ``E H``) is flat, anchored to its mean
    level over ``eq_band``. Bins pushed over the cap by the equalization
    are scaled back down to it.
    """
    cfg = stft_config or StftConfig(sample_rate=atf.sample_rate)
    if cfg.sample_rate != atf.sample_rate:
        raise ValueError("STFT and ATF sample rates differ")
    K = num_sh(order)
    if K > atf.num_mics:
        raise ValueError(f"order {order} needs {K} microphones, the array has {atf.num_mics}")
    if len(atf.grid) < K:
        raise ValueError("ATF grid has fewer directions than SH coefficients")
    freqs = cfg.frequencies
    H = atf.frequency_response(freqs)
    if not np.any(H):
        raise ValueError("ATF set is identically zero")
    cap = 10 ** (max_gain_db / 20) if np.isfinite(max_gain_db) else np.inf
    sqrt_w = np.sqrt(atf.grid.weights)
    Ysw = eval_real_sh(order, atf.grid) * sqrt_w

    E = np.zeros((len(freqs), K, atf.num_mics), dtype=complex)
    lam = np.zeros(len(freqs))
    saturated = []
    for f in range(len(freqs)):
        if not np.any(H[f]):
            saturated.append(f)
            continue
        E[f], lam[f], sat = _design_bin(H[f], Ysw, sqrt_w, cap)
        if sat:
            saturated.append(f)
    if saturated:
        warnings.warn(f"gain cap could not be met in {len(saturated)} bins; rows set to zero", RuntimeWarning)

    if diffuse_eq:
        response = np.einsum("fkm,fmd->fkd", E, H)
        rms = np.sqrt(np.einsum("d,fkd->fk", atf.grid.weights, np.abs(response) ** 2))
        band = (freqs >= eq_band[0]) & (freqs <= eq_band[1])
        if not np.any(band):
            raise ValueError("diffuse-field EQ band contains no bins")
        target = rms[band].mean(axis=0)
        gain = np.where(rms > 0, target / np.where(rms > 0, rms, 1.0), 0.0)
        E = E * gain[:, :, None]
        if np.isfinite(cap):
            smax = np.linalg.svd(E, compute_uv=False)[:, 0]
            over = smax > cap
            E[over] *= (cap / smax[over])[:, None, None]

    return EncoderMatrix(order, freqs, E, cfg.sample_rate, 0, float(max_gain_db), diffuse_eq, lam, saturated)


def apply_encoder(enc: EncoderMatrix, p: Spectrogram) -> Spectrogram:
    """``a_hat(t, f) = E(f) p(t, f)`` for every frame and bin."""
    if p.num_bins != len(enc.frequencies):
        raise ValueError(f"spectrogram has {p.num_bins} bins, encoder {len(enc.frequencies)}")
    if p.config.sample_rate != enc.sample_rate:
        raise ValueError("sample rate mismatch between encoder and spectrogram")
    if p.num_channels != enc.num_mics:
        raise ValueError(f"spectrogram has {p.num_channels} channels, encoder expects {enc.num_mics}")
    return p.with_values(np.einsum("fkm,mtf->ktf", enc.E, p.values))


def save_encoder(enc: EncoderMatrix, path) -> None:
    """Magic, u32 header length, JSON header, then ``E`` as interleaved little-endian f64."""
    header = {
        "order": enc.order,
        "num_bins": len(enc.frequencies),
        "num_mics": enc.num_mics,
        "frequencies": enc.frequencies.tolist(),
        "sample_rate": enc.sample_rate,
        "latency": enc.latency,
        "max_gain_db": enc.max_gain_db if np.isfinite(enc.max_gain_db) else None,
        "diffuse_eq": enc.diffuse_eq,
        "regularization": None if enc.regularization is None else enc.regularization.tolist(),
        "saturated_bins": list(enc.saturated_bins),
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_ENC_MAGIC + struct.pack("<I", len(blob)) + blob)
        fh.write(enc.E.astype("<c16").tobytes())


def load_encoder(path) -> EncoderMatrix:
    raw = Path(path).read_bytes()
    if raw[:8] != _ENC_MAGIC:
        raise ValueError(f"{path} is not an encoder file")
    (n,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + n])
    F, M, K = header["num_bins"], header["num_mics"], num_sh(header["order"])
    payload = raw[12 + n :]
    if len(payload) != 16 * F * K * M:
        raise ValueError("encoder payload size does not match header")
    E = np.frombuffer(payload, "<c16").reshape(F, K, M).copy()
    reg = header["regularization"]
    return EncoderMatrix(
        header["order"], np.array(header["frequencies"]), E, header["sample_rate"], header["latency"],
        np.inf if header["max_gain_db"] is None else header["max_gain_db"], header["diffuse_eq"],
        None if reg is None else np.array(reg), header["saturated_bins"],
    )
