"""Array transfer functions: container, rigid-sphere head proxy, SH-domain fit, file I/O."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sphere import SphericalGrid, directions_to_vectors, eval_real_sh, radial_term, uniform_grid

__all__ = [
    "ATFSet",
    "ShArrayResponse",
    "ATFFormatError",
    "SeriesConvergenceError",
    "head_mic_layout",
    "synth_sphere_atf",
    "synth_head_array_atf",
    "sphere_pressure",
    "fit_sh_array_response",
    "fit_sh_response_matrix",
    "save_atf",
    "load_atf",
    "import_wav_folder",
]

MAGIC = b"ATFSET01"
_HEADER = struct.Struct("<8s4I")


class ATFFormatError(ValueError):
    """Raised for malformed ATFSET01 files."""


class SeriesConvergenceError(RuntimeError):
    """The truncated sphere series is not accurate enough for the requested ka."""


@dataclass
class ATFSet:
    """Impulse responses ``irs[direction, mic, sample]`` on a direction grid.

    IRs are stored as float32 so that the file format round trip is exact.
    """

    irs: np.ndarray
    grid: SphericalGrid
    sample_rate: int
    mic_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.irs = np.ascontiguousarray(self.irs, dtype=np.float32)
        if self.irs.ndim != 3:
            raise ValueError("irs must be [directions, mics, samples]")
        if self.irs.shape[0] != len(self.grid):
            raise ValueError(f"{self.irs.shape[0]} IR directions but {len(self.grid)} grid points")
        if self.irs.shape[1] < 1:
            raise ValueError("at least one microphone required")
        if not np.all(np.isfinite(self.irs)):
            raise ValueError("impulse responses must be finite")
        if not self.mic_labels:
            self.mic_labels = [f"mic{i}" for i in range(self.num_mics)]
        if len(self.mic_labels) != self.num_mics:
            raise ValueError("one label per microphone required")

    @property
    def num_mics(self) -> int:
        return self.irs.shape[1]

    @property
    def num_directions(self) -> int:
        return self.irs.shape[0]

    @property
    def ir_length(self) -> int:
        return self.irs.shape[2]

    def frequency_response(self, freqs) -> np.ndarray:
        """Transfer functions ``H[f, mic, direction]`` at the given frequencies.

        When every frequency sits on the DFT grid of some zero-padded length
        (e.g. STFT bin centres) an FFT is used, otherwise a direct DFT.
        """
        freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
        L = self.ir_length
        irs = self.irs.astype(float)
        for mult in range(1, 65):
            nfft = L * mult
            k = freqs * nfft / self.sample_rate
            if np.allclose(k, np.round(k), atol=1e-9) and np.all(np.round(k) <= nfft // 2):
                spec = np.fft.rfft(irs, n=nfft, axis=-1)[..., np.round(k).astype(int)]
                return np.transpose(spec, (2, 1, 0))
        n = np.arange(L)
        kernel = np.exp(-2j * np.pi * np.outer(n, freqs) / self.sample_rate)
        return np.transpose(irs @ kernel, (2, 1, 0))


@dataclass
class ShArrayResponse:
    """SH-domain array response ``d[f, sh, mic]`` such that ``H(dir) = Y(dir)^T d``."""

    order: int
    frequencies: np.ndarray
    d: np.ndarray
    residual: np.ndarray | None = None


def head_mic_layout() -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Five-microphone glasses layout on a head sphere: (azimuth, inclination, labels).

    One microphone at the nose bridge and two along each temple, mirror
    symmetric about the median plane.
    """
    deg = np.pi / 180
    az = np.array([0.0, 90.0, 110.0, -90.0, -110.0]) * deg
    incl = np.array([85.0, 80.0, 80.0, 80.0, 80.0]) * deg
    labels = ["nose", "left_front", "left_rear", "right_front", "right_rear"]
    return np.mod(az, 2 * np.pi), incl, labels


def _legendre_table(max_n: int, x: np.ndarray) -> np.ndarray:
    P = np.empty((max_n + 1,) + x.shape)
    P[0] = 1.0
    if max_n >= 1:
        P[1] = x
    for n in range(1, max_n):
        P[n + 1] = ((2 * n + 1) * x * P[n] - n * P[n - 1]) / (n + 1)
    return P


MAX_SERIES_ORDER = 400


def truncation_order(freq_max: float, radius: float, speed_of_sound: float = 343.0) -> int:
    ka = 2 * np.pi * freq_max * radius / speed_of_sound
    return int(math.ceil(np.e * ka / 2)) + 2


def sphere_pressure(freqs, radius, mic_dirs, source_dirs, model="rigid", speed_of_sound=343.0,
                    order=None, tol=1e-3) -> np.ndarray:
    """Pressure on a sphere surface due to unit plane waves, ``P[f, mic, source]``.

    Parameters
    ----------
    freqs : array_like
        Frequencies in Hz.
    mic_dirs, source_dirs : (azimuth, inclination) tuples of arrays
    order : int, optional
        Series truncation. By default it starts at ``ceil(e k a / 2) + 2``
        for the top frequency and grows until the last term is below
        ``tol``. For the open model without an explicit order the exact
        plane-wave phase ``exp(j k r cos gamma)`` is returned instead.
    tol : float
        Largest allowed magnitude of the last retained series term (the
        incident wave has unit amplitude), otherwise
        :class:`SeriesConvergenceError`.
    """
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    mic_v = directions_to_vectors(*mic_dirs)
    src_v = directions_to_vectors(*source_dirs)
    cos_gamma = np.clip(mic_v @ src_v.T, -1.0, 1.0)
    if model == "open" and order is None:
        k = 2 * np.pi * freqs / speed_of_sound
        return np.exp(1j * k[:, None, None] * radius * cos_gamma[None])
    adaptive = order is None
    if adaptive:
        order = truncation_order(freqs.max(), radius, speed_of_sound)
    while True:
        n = np.arange(order + 1)
        b = radial_term(n[None, :], freqs[:, None], radius, speed_of_sound, model) * (2 * n + 1) / (4 * np.pi)
        last = np.abs(b[:, -1]).max()
        # |p| >= 1 - O(ka) is not guaranteed, so compare with the n = 0 term (unit plane wave)
        if last <= tol or not adaptive or order >= MAX_SERIES_ORDER:
            break
        order += 4
    if last > tol:
        raise SeriesConvergenceError(f"series truncated at order {order} leaves a term of {last:.2e}")
    P = _legendre_table(order, cos_gamma)
    return np.einsum("fn,nmd->fmd", b, P)


def synth_sphere_atf(radius, mic_dirs, grid: SphericalGrid, fs=48000, ir_len=256, model="rigid",
                     delay=32, taper=True, speed_of_sound=343.0, mic_labels=None, order=None) -> ATFSet:
    """ATFs of microphones on an open or rigid sphere.

    The pressure series is evaluated on the ``ir_len``-point DFT grid,
    delayed by ``delay`` samples and inverse transformed. With ``taper`` the
    response is rolled off above 0.8 x Nyquist (a raised cosine) and the
    last quarter of each IR is faded out, which keeps band-edge ringing
    below -60 dB at the end of the IR.
    """
    if ir_len < 16:
        raise ValueError("ir_len too short")
    freqs = np.fft.rfftfreq(ir_len, 1.0 / fs)
    p = sphere_pressure(freqs, radius, mic_dirs, (grid.azimuth, grid.inclination), model,
                        speed_of_sound, order)
    p = p * np.exp(-2j * np.pi * freqs * delay / fs)[:, None, None]
    if taper:
        edge = 0.8 * fs / 2
        rolloff = np.ones_like(freqs)
        hi = freqs > edge
        rolloff[hi] = 0.5 + 0.5 * np.cos(np.pi * (freqs[hi] - edge) / (fs / 2 - edge))
        p = p * rolloff[:, None, None]
    irs = np.fft.irfft(p, n=ir_len, axis=0)
    if taper:
        fade = ir_len // 4
        window = np.ones(ir_len)
        window[-fade:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(1, fade + 1) / fade)
        irs = irs * window[:, None, None]
    return ATFSet(np.transpose(irs, (2, 1, 0)), grid, int(fs), list(mic_labels or []))


def synth_head_array_atf(head_radius=0.09, mic_layout=None, grid=None, fs=48000, ir_len=256,
                         delay=32) -> ATFSet:
    """Rigid-sphere head proxy with the five-microphone glasses layout.

    ``mic_layout`` is an ``(azimuth, inclination, labels)`` tuple; the
    default is :func:`head_mic_layout`. ``grid`` defaults to 960 Fibonacci
    directions.
    """
    if ir_len < 256:
        raise ValueError("ir_len must be >= 256")
    az, incl, labels = mic_layout if mic_layout is not None else head_mic_layout()
    grid = grid if grid is not None else uniform_grid(960)
    return synth_sphere_atf(head_radius, (np.asarray(az), np.asarray(incl)), grid, fs, ir_len,
                            "rigid", delay, True, mic_labels=labels)


def fit_sh_response_matrix(H: np.ndarray, grid: SphericalGrid, order: int):
    """Weighted least-squares fit of ``H[f, mic, dir]`` by order-``order`` SHs.

    Returns ``(d[f, sh, mic], residual[f])`` where the residual is the
    weighted relative misfit.
    """
    Y = eval_real_sh(order, grid)
    if len(grid) < Y.shape[0]:
        raise ValueError(f"{len(grid)} directions cannot determine {Y.shape[0]} SH coefficients")
    w = grid.weights
    gram = (Y * w) @ Y.T
    if np.linalg.cond(gram) > 1e10:
        raise np.linalg.LinAlgError("SH matrix is rank deficient on this grid")
    # d = (Y W Y^T)^-1 Y W H^T for every frequency
    rhs = np.einsum("kd,fmd->fkm", Y * w, H)
    d = np.linalg.solve(gram, rhs)
    model = np.einsum("kd,fkm->fmd", Y, d)
    num = np.einsum("d,fmd->f", w, np.abs(H - model) ** 2)
    den = np.einsum("d,fmd->f", w, np.abs(H) ** 2)
    residual = np.sqrt(num / np.where(den > 0, den, 1.0))
    return d, residual


def fit_sh_array_response(atf: ATFSet, order: int, frequencies) -> ShArrayResponse:
    """SH-domain array response fitted to the ATFs at ``frequencies`` (Hz)."""
    frequencies = np.atleast_1d(np.asarray(frequencies, dtype=float))
    d, residual = fit_sh_response_matrix(atf.frequency_response(frequencies), atf.grid, order)
    return ShArrayResponse(order, frequencies, d, residual)


def save_atf(atf: ATFSet, path) -> None:
    """Write the ATFSET01 binary format.

    Layout: magic ``ATFSET01``, little-endian u32 ``M, D, L, fs``, f64
    ``(azimuth, inclination)`` per direction, f32 IRs ``[D][M][L]``.
    Grid weights and microphone labels are not stored.
    """
    D, M, L = atf.irs.shape
    dirs = np.stack([atf.grid.azimuth, atf.grid.inclination], axis=1).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, M, D, L, int(atf.sample_rate)))
        fh.write(dirs.tobytes())
        fh.write(atf.irs.astype("<f4").tobytes())


def load_atf(path) -> ATFSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ATFFormatError("file too short for ATFSET01 header")
    magic, M, D, L, fs = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ATFFormatError(f"bad magic {magic!r}")
    if min(M, D, L, fs) == 0:
        raise ATFFormatError("header contains a zero dimension")
    expected = _HEADER.size + 16 * D + 4 * D * M * L
    if len(raw) != expected:
        raise ATFFormatError(f"payload size {len(raw)} does not match header ({expected} bytes)")
    dirs = np.frombuffer(raw, "<f8", 2 * D, _HEADER.size).reshape(D, 2)
    irs = np.frombuffer(raw, "<f4", D * M * L, _HEADER.size + 16 * D).reshape(D, M, L)
    grid = SphericalGrid(dirs[:, 0].copy(), dirs[:, 1].copy())
    return ATFSet(irs.copy(), grid, fs)


def import_wav_folder(folder) -> ATFSet:
    """Load ATFs from per-direction multichannel WAVs listed in ``manifest.json``.

    The manifest holds ``{"files": [{"file": ..., "azimuth_deg": ...,
    "inclination_deg": ...}, ...], "mic_labels": [...]}``.
    """
    from .stft import read_wav

    folder = Path(folder)
    manifest = json.loads((folder / "manifest.json").read_text())
    entries = manifest["files"]
    irs, az, incl, fs_all = [], [], [], set()
    for entry in entries:
        data, fs = read_wav(folder / entry["file"])
        irs.append(data)
        fs_all.add(fs)
        az.append(np.deg2rad(entry["azimuth_deg"]))
        incl.append(np.deg2rad(entry["inclination_deg"]))
    if len(fs_all) != 1:
        raise ValueError(f"inconsistent sample rates {sorted(fs_all)}")
    lengths = {x.shape for x in irs}
    if len(lengths) != 1:
        raise ValueError("all IR files must have the same channel count and length")
    return ATFSet(np.stack(irs), SphericalGrid(np.array(az), np.array(incl)), fs_all.pop(),
                  list(manifest.get("mic_labels", [])))
