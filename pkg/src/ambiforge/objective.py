"""Training loss and evaluation metrics for SH-domain signals.

Spectrogram-domain functions take arrays shaped ``[channels, frames, bins]``
(or :class:`~ambiforge.stft.Spectrogram` objects); channels are ACN ordered.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradkit as gk
from .sphere import SphericalGrid, eval_real_sh, order_of_channels, uniform_grid
from .stft import Spectrogram, StftConfig, analyze

__all__ = [
    "LossConfig",
    "beta_weights",
    "mae_loss",
    "coherence",
    "coherence_loss",
    "total_loss",
    "total_loss_tensor",
    "mag_spectral_error",
    "si_sdr",
    "spatial_power_map",
    "spme",
    "spme_per_bin",
    "coherence_report",
    "CoherenceReport",
    "MetricsReport",
    "evaluate_signals",
    "write_metrics_csv",
]

MAG_FLOOR = 1e-12
SPME_FLOOR = 1e-12
SISDR_CAP = 60.0


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Spectrogram) else np.asarray(x)


def _check_pair(a, ahat):
    a, ahat = _values(a), _values(ahat)
    if a.shape != ahat.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {ahat.shape}")
    return a, ahat


def beta_weights(freqs) -> np.ndarray:
    """``beta(f) = f_1 / f`` with ``f_1`` the first non-zero bin; zero at DC."""
    freqs = np.asarray(freqs, dtype=float)
    positive = freqs > 0
    if not np.any(positive):
        raise ValueError("no positive frequencies")
    f1 = freqs[positive].min()
    return np.where(positive, f1 / np.where(positive, freqs, 1.0), 0.0)


@dataclass
class LossConfig:
    beta: np.ndarray
    order: int = 1
    alpha: float = 10.0

    @classmethod
    def for_stft(cls, config: StftConfig | None = None, order: int = 1, alpha: float = 10.0) -> "LossConfig":
        config = config or StftConfig()
        return cls(beta_weights(config.frequencies), order, alpha)

    @property
    def channel_weights(self) -> np.ndarray:
        """``1 / ((N+1)(2n+1))`` per ACN channel; sums to one."""
        n = order_of_channels((self.order + 1) ** 2)
        return 1.0 / ((self.order + 1) * (2 * n + 1))


def mae_loss(a, ahat) -> np.ndarray:
    """Per-bin mean over frames and channels of ``|a - a_hat|``."""
    a, ahat = _check_pair(a, ahat)
    return np.abs(a - ahat).mean(axis=(0, 1))


def coherence(a, ahat) -> np.ndarray:
    """Squared normalized cross-spectrum over frames, ``[channels, bins]`` in [0, 1].

    Both channels silent gives 1, exactly one silent gives 0.
    """
    a, ahat = _check_pair(a, ahat)
    ar, ai, hr, hi = a.real, a.imag, ahat.real, ahat.imag
    # written out in real arithmetic so that identical inputs give exactly 1
    cross = np.sum(ar * hr + ai * hi, axis=1) ** 2 + np.sum(ar * hi - ai * hr, axis=1) ** 2
    ea = np.sum(ar * ar + ai * ai, axis=1)
    eh = np.sum(hr * hr + hi * hi, axis=1)
    denom = ea * eh
    coh = np.divide(cross, denom, out=np.zeros_like(cross), where=denom > 0)
    coh[(ea == 0) & (eh == 0)] = 1.0
    return np.clip(coh, 0.0, 1.0)


def coherence_loss(a, ahat) -> np.ndarray:
    return 1.0 - coherence(a, ahat)


def total_loss(a, ahat, cfg: LossConfig) -> float:
    """``mean_f [alpha MAE(f) + beta(f)/(N+1) sum_nm C_nm(f) / (2n+1)]``."""
    a, ahat = _check_pair(a, ahat)
    if a.shape[2] != len(cfg.beta):
        raise ValueError("loss config bins do not match the spectrogram")
    if a.shape[0] != (cfg.order + 1) ** 2:
        raise ValueError("channel count does not match the loss order")
    coh_term = cfg.channel_weights @ coherence_loss(a, ahat)
    return float(np.mean(cfg.alpha * mae_loss(a, ahat) + cfg.beta * coh_term))


def total_loss_tensor(ahat_re: gk.Tensor, ahat_im: gk.Tensor, a_re: np.ndarray, a_im: np.ndarray,
                      cfg: LossConfig) -> gk.Tensor:
    """Differentiable :func:`total_loss` averaged over a batch.

    Layout is ``[batch, frames, bins, channels]`` for estimate and reference.
    """
    if ahat_re.shape != a_re.shape:
        raise ValueError(f"shape mismatch {ahat_re.shape} vs {a_re.shape}")
    B, T, F, K = a_re.shape
    mae = gk.mean(gk.hypot(ahat_re - a_re, ahat_im - a_im), axis=(1, 3))  # [B, F]

    cross_re = gk.sum_axis(ahat_re * a_re + ahat_im * a_im, axis=1)  # [B, F, K]
    cross_im = gk.sum_axis(ahat_im * a_re - ahat_re * a_im, axis=1)
    ea = np.sum(a_re**2 + a_im**2, axis=1)
    eh = gk.sum_axis(gk.square(ahat_re) + gk.square(ahat_im), axis=1)
    both_zero = (ea == 0) & (eh.value == 0)
    degenerate = (ea == 0) | (eh.value == 0)
    denom = eh * ea + degenerate.astype(float)
    coh = (gk.square(cross_re) + gk.square(cross_im)) / denom + both_zero.astype(float)
    coh_term = gk.sum_axis((1.0 - coh) * cfg.channel_weights, axis=2)  # [B, F]
    per_bin = cfg.alpha * mae + coh_term * cfg.beta
    return gk.mean(per_bin)


def mag_spectral_error(a, ahat) -> tuple[np.ndarray, float]:
    """``S(f)``: mean of ``|20 log10(|a| / |a_hat|)|`` over frames and channels; and its bin mean."""
    a, ahat = _check_pair(a, ahat)
    ratio = np.maximum(np.abs(a), MAG_FLOOR) / np.maximum(np.abs(ahat), MAG_FLOOR)
    S = np.abs(20 * np.log10(ratio)).mean(axis=(0, 1))
    return S, float(S.mean())


def si_sdr(ref, est) -> tuple[np.ndarray, float]:
    """Scale-invariant SDR per channel (dB, capped at +-60) and the channel mean.

    ``ref`` and ``est`` are ``[channels, samples]`` (or 1-D).
    """
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    est = np.atleast_2d(np.asarray(est, dtype=float))
    if ref.shape != est.shape:
        raise ValueError("reference and estimate differ in shape")
    ref_energy = np.sum(ref**2, axis=1)
    if np.any(ref_energy == 0):
        raise ValueError("SI-SDR is undefined for a silent reference channel")
    gain = np.sum(est * ref, axis=1) / ref_energy
    target = gain[:, None] * ref
    noise = est - target
    t_energy = np.sum(target**2, axis=1)
    n_energy = np.sum(noise**2, axis=1)
    with np.errstate(divide="ignore"):
        ratio = 10 * np.log10(t_energy) - 10 * np.log10(n_energy)
    ratio = np.where(n_energy == 0, SISDR_CAP, np.where(t_energy == 0, -SISDR_CAP, ratio))
    ratio = np.clip(ratio, -SISDR_CAP, SISDR_CAP)
    return ratio, float(ratio.mean())


def spatial_power_map(a_time, grid: SphericalGrid) -> np.ndarray:
    """``Gamma(Omega_q) = sqrt(sum_t (sum_nm Y_nm(Omega_q) a_nm(t))^2)``."""
    a_time = np.atleast_2d(np.asarray(a_time, dtype=float))
    order = int(order_of_channels(a_time.shape[0]).max())
    Y = eval_real_sh(order, grid)
    # sum_t (Y^T a)^2 = diag(Y^T R Y) with R the channel covariance
    R = a_time @ a_time.T
    return np.sqrt(np.maximum(np.einsum("kq,kl,lq->q", Y, R, Y), 0.0))


def spme(a_time, ahat_time, grid: SphericalGrid | None = None) -> float:
    """Spatial power map error ``20 log10(mean_q |Gamma_hat - Gamma|)`` in dB."""
    a_time = np.atleast_2d(np.asarray(a_time, dtype=float))
    ahat_time = np.atleast_2d(np.asarray(ahat_time, dtype=float))
    if a_time.shape != ahat_time.shape:
        raise ValueError("shape mismatch")
    order_of_channels(a_time.shape[0])
    grid = grid or uniform_grid(1296)
    diff = np.abs(spatial_power_map(ahat_time, grid) - spatial_power_map(a_time, grid))
    return float(20 * np.log10(max(diff.mean(), SPME_FLOOR)))


def spme_per_bin(a, ahat, grid: SphericalGrid | None = None) -> np.ndarray:
    """Per-bin SPME from STFT coefficients, ``Gamma_f = sqrt(sum_t |Y^T a(t, f)|^2)``."""
    a, ahat = _check_pair(a, ahat)
    grid = grid or uniform_grid(1296)
    Y = eval_real_sh(int(order_of_channels(a.shape[0]).max()), grid)

    def power(x):
        return np.sqrt(np.sum(np.abs(np.einsum("kq,ktf->qtf", Y, x)) ** 2, axis=1))

    diff = np.abs(power(ahat) - power(a)).mean(axis=0)
    return 20 * np.log10(np.maximum(diff, SPME_FLOOR))


@dataclass
class CoherenceReport:
    """Per-channel coherence curves and their frequency/order weighted mean.

    The scalar uses weights ``beta(f) / sum(beta)`` across bins and
    ``1 / ((N+1)(2n+1))`` across channels, so it lies in [0, 1].
    """

    weighted: float
    curves: np.ndarray
    frequencies: np.ndarray


def coherence_report(a, ahat, freqs=None) -> CoherenceReport:
    a_v, ahat_v = _check_pair(a, ahat)
    if freqs is None:
        freqs = a.frequencies if isinstance(a, Spectrogram) else StftConfig().frequencies
    freqs = np.asarray(freqs)
    coh = coherence(a_v, ahat_v)
    order = int(order_of_channels(a_v.shape[0]).max())
    cw = LossConfig(beta_weights(freqs), order).channel_weights
    beta = beta_weights(freqs)
    weighted = float((beta / beta.sum()) @ (cw @ coh))
    return CoherenceReport(weighted, coh, freqs)


@dataclass
class MetricsReport:
    coherence: float
    magerr_db: float
    sisdr_db: float
    spme_db: float
    coherence_curves: np.ndarray = field(repr=False)
    magerr_per_bin: np.ndarray = field(repr=False)
    sisdr_per_channel: np.ndarray = field(repr=False)
    spme_per_bin: np.ndarray = field(repr=False)
    frequencies: np.ndarray = field(repr=False)
    flags: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {"coh": self.coherence, "magerr_db": self.magerr_db, "sisdr_db": self.sisdr_db,
                "spme_db": self.spme_db}

    def to_json(self) -> str:
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        d["normalization"] = "coherence weights: beta(f)/sum(beta) over bins, 1/((N+1)(2n+1)) over channels"
        return json.dumps(d)


def evaluate_signals(a_time, ahat_time, config: StftConfig | None = None,
                     grid: SphericalGrid | None = None) -> MetricsReport:
    """All metrics for one scene from time-domain reference and estimate."""
    config = config or StftConfig()
    A = analyze(a_time, config)
    Ah = analyze(ahat_time, config)
    coh = coherence_report(A, Ah)
    S, S_mean = mag_spectral_error(A, Ah)
    sdr, sdr_mean = si_sdr(a_time, ahat_time)
    flags = []
    silent = np.sum(np.abs(A.values) ** 2, axis=1) == 0
    if np.any(silent):
        flags.append(f"{int(silent.sum())} silent reference channel-bins in coherence")
    return MetricsReport(coh.weighted, S_mean, sdr_mean, spme(a_time, ahat_time, grid), coh.curves, S, sdr,
                         spme_per_bin(A, Ah, grid), config.frequencies, flags)


def write_metrics_csv(rows: list[tuple[str, str, MetricsReport]], path, curves_path=None) -> None:
    """One row per (scene, encoder); optional sidecar with per-channel coherence curves."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "encoder", "coh", "magerr_db", "sisdr_db", "spme_db"])
        for scene, encoder, rep in rows:
            w.writerow([scene, encoder, f"{rep.coherence:.10g}", f"{rep.magerr_db:.10g}",
                        f"{rep.sisdr_db:.10g}", f"{rep.spme_db:.10g}"])
    if curves_path is not None:
        with open(curves_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene", "encoder", "channel", "freq_hz", "coherence"])
            for scene, encoder, rep in rows:
                for k, curve in enumerate(rep.coherence_curves):
                    for f, c in zip(rep.frequencies, curve):
                        w.writerow([scene, encoder, k, f"{f:.6g}", f"{c:.10g}"])
