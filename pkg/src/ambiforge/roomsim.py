"""Shoebox image-source simulation of array signals and ideal SH references."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .atf import ATFSet
from .sphere import eval_real_sh, num_sh, vectors_to_directions
from .stft import read_wav, write_wav

__all__ = [
    "RoomSpec",
    "ReceiverPose",
    "SceneSpec",
    "ImageSet",
    "SceneResult",
    "enumerate_images",
    "fractional_delay_kernel",
    "render_array_rir",
    "render_sh_rir",
    "synth_scene",
    "random_scene",
    "synthetic_source",
    "WavPool",
    "generate_dataset",
    "load_scene",
]

FD_TAPS = 16
WALLS = ("x0", "x1", "y0", "y1", "z0", "z1")


@dataclass
class RoomSpec:
    """Shoebox dimensions (m) and absorption per wall in the order x0, x1, y0, y1, z0, z1."""

    dims: tuple[float, float, float]
    absorption: tuple[float, ...] = (0.5,) * 6
    speed_of_sound: float = 343.0

    def __post_init__(self):
        self.dims = tuple(float(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError("room needs three positive dimensions")
        a = np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,))
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("absorption coefficients must lie in (0, 1]")
        self.absorption = tuple(float(x) for x in a)

    def contains(self, point, margin=0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.asarray(self.dims) - margin))

    def reflection_coefficients(self) -> np.ndarray:
        """Pressure reflection factor ``sqrt(1 - alpha)``, shape (3, 2) for [axis, near/far wall]."""
        return np.sqrt(1.0 - np.asarray(self.absorption)).reshape(3, 2)


@dataclass
class ReceiverPose:
    position: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        self.position = tuple(float(v) for v in self.position)
        self.yaw = float(self.yaw)

    def to_local(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate world-frame vectors into the receiver frame (+x = look direction)."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        v = np.asarray(vectors, dtype=float)
        return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1], v[..., 2]], axis=-1)


@dataclass
class SceneSpec:
    room: RoomSpec
    receiver: ReceiverPose
    sources: list[tuple[float, float, float]]
    seed: int = 0
    duration: float = 2.0
    sample_rate: int = 48000
    source_level_db: float = -30.0
    source_kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= len(self.sources) <= 5:
            raise ValueError("a scene has one to five sources")
        rx = np.asarray(self.receiver.position)
        if not self.room.contains(rx):
            raise ValueError("receiver outside the room")
        for s in self.sources:
            if not self.room.contains(s):
                raise ValueError(f"source {s} outside the room")
            if np.linalg.norm(np.asarray(s) - rx) < 0.2:
                raise ValueError("source closer than 0.2 m to the receiver")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["room"] = RoomSpec(**d["room"])
        d["receiver"] = ReceiverPose(**d["receiver"])
        d["sources"] = [tuple(s) for s in d["sources"]]
        return cls(**d)


@dataclass
class ImageSet:
    positions: np.ndarray
    gains: np.ndarray
    orders: np.ndarray

    def __len__(self) -> int:
        return len(self.gains)


def enumerate_images(room: RoomSpec, source, max_order: int) -> ImageSet:
    """Mirror images with at most ``max_order`` reflections.

    Along each axis an image sits at ``(1 - 2q) s + 2 n L`` for lattice index
    ``n`` and parity ``q``; it has ``|n - q|`` reflections off the near wall
    and ``|n|`` off the far wall. Images whose gain is zero (fully
    absorbing walls) are dropped.
    """
    s = np.asarray(source, dtype=float)
    if not room.contains(s):
        raise ValueError("source must be strictly inside the room")
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    L = np.asarray(room.dims)
    beta = room.reflection_coefficients()
    half = max_order // 2 + 1
    n = np.arange(-half, half + 1)
    q = np.array([0, 1])
    # per-axis candidates: coordinate, near/far reflection counts
    coords, near, far = [], [], []
    for ax in range(3):
        nn, qq = np.meshgrid(n, q, indexing="ij")
        nn, qq = nn.ravel(), qq.ravel()
        coords.append((1 - 2 * qq) * s[ax] + 2 * nn * L[ax])
        near.append(np.abs(nn - qq))
        far.append(np.abs(nn))
    ix, iy, iz = np.meshgrid(*(np.arange(len(c)) for c in coords), indexing="ij")
    ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
    order = sum(near[a][i] + far[a][i] for a, i in zip(range(3), (ix, iy, iz)))
    keep = order <= max_order
    ix, iy, iz, order = ix[keep], iy[keep], iz[keep], order[keep]
    pos = np.stack([coords[0][ix], coords[1][iy], coords[2][iz]], axis=1)
    gain = np.ones(len(order))
    for a, i in zip(range(3), (ix, iy, iz)):
        gain *= beta[a, 0] ** near[a][i] * beta[a, 1] ** far[a][i]
    nonzero = gain > 0
    pos, gain, order = pos[nonzero], gain[nonzero], order[nonzero]
    idx = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], order))
    return ImageSet(pos[idx], gain[idx], order[idx])


def fractional_delay_kernel(delays: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed sinc interpolators, 16 taps each.

    Returns ``(start, taps)`` where ``taps[i]`` applies to samples
    ``start[i] .. start[i] + 15``.
    """
    delays = np.asarray(delays, dtype=float)
    base = np.floor(delays).astype(int)
    start = base - FD_TAPS // 2 + 1
    x = start[:, None] + np.arange(FD_TAPS)[None, :] - delays[:, None]
    taps = np.sinc(x) * 0.5 * (1 + np.cos(np.pi * x / (FD_TAPS / 2)))
    return start, taps


def _arrivals(images: ImageSet, receiver: ReceiverPose, fs, c):
    rel = images.positions - np.asarray(receiver.position, dtype=float)
    dist = np.linalg.norm(rel, axis=1)
    if np.any(dist <= 0):
        raise ValueError("image coincides with the receiver")
    local = receiver.to_local(rel / dist[:, None])
    start, taps = fractional_delay_kernel(dist / c * fs)
    if np.any(start < 0):
        raise ValueError("source too close to the receiver for the interpolation kernel")
    amp = images.gains / dist
    return local, start, taps * amp[:, None]


def _scatter(start, blocks, length):
    """Sum rows of ``blocks[i, ch, k]`` into ``out[ch, start[i] + k]``."""
    n_img, n_ch, width = blocks.shape
    idx = (start[:, None] + np.arange(width)[None, :]).ravel()
    out = np.empty((n_ch, length))
    for ch in range(n_ch):
        out[ch] = np.bincount(idx, weights=blocks[:, ch].ravel(), minlength=length)[:length]
    return out


def render_array_rir(images: ImageSet, atf: ATFSet, receiver: ReceiverPose, speed_of_sound=343.0,
                     chunk=2048) -> np.ndarray:
    """M-channel RIR; each image is spatialized with the nearest-direction ATF."""
    if len(images) == 0:
        raise ValueError("no images to render")
    fs = atf.sample_rate
    local, start, taps = _arrivals(images, receiver, fs, speed_of_sound)
    nearest = atf.grid.nearest(local)
    L = atf.ir_length
    width = FD_TAPS + L - 1
    nfft = 1 << int(np.ceil(np.log2(width)))
    atf_f = np.fft.rfft(atf.irs.astype(float), n=nfft, axis=-1)
    length = int(start.max()) + width
    out = np.zeros((atf.num_mics, length))
    for i in range(0, len(images), chunk):
        sl = slice(i, i + chunk)
        kern_f = np.fft.rfft(taps[sl], n=nfft, axis=-1)
        blocks = np.fft.irfft(kern_f[:, None, :] * atf_f[nearest[sl]], n=nfft, axis=-1)[..., :width]
        out += _scatter(start[sl], blocks, length)
    return out


def render_sh_rir(images: ImageSet, order: int, receiver: ReceiverPose, fs=48000,
                  speed_of_sound=343.0) -> np.ndarray:
    """Ideal SH receiver RIR, ``(N+1)**2`` channels in ACN/N3D."""
    if len(images) == 0:
        raise ValueError("no images to render")
    local, start, taps = _arrivals(images, receiver, fs, speed_of_sound)
    Y = eval_real_sh(order, *vectors_to_directions(local))
    blocks = Y.T[:, :, None] * taps[:, None, :]
    return _scatter(start, blocks, int(start.max()) + FD_TAPS)


@dataclass
class SceneResult:
    array: np.ndarray
    reference: np.ndarray
    meta: dict


def _convolve_trim(audio, rir, n):
    out = sps.fftconvolve(audio[None, :], rir, axes=-1)[:, :n]
    if out.shape[1] < n:
        out = np.pad(out, ((0, 0), (0, n - out.shape[1])))
    return out


def synth_scene(scene: SceneSpec, atf: ATFSet, source_audio, order: int = 1, max_order: int = 20) -> SceneResult:
    """Render array signals and SH reference for every source and sum them.

    Each source signal is scaled to ``scene.source_level_db`` RMS (dBFS)
    before convolution.
    """
    if atf.sample_rate != scene.sample_rate:
        raise ValueError("ATF and scene sample rates differ")
    if len(source_audio) != len(scene.sources):
        raise ValueError("one audio signal per source required")
    n = int(round(scene.duration * scene.sample_rate))
    c = scene.room.speed_of_sound
    array = np.zeros((atf.num_mics, n))
    reference = np.zeros((num_sh(order), n))
    for src, audio in zip(scene.sources, source_audio):
        audio = np.asarray(audio, dtype=float)
        if audio.ndim != 1 or len(audio) < n:
            raise ValueError(f"source audio must be 1-D with at least {n} samples")
        audio = audio[:n]
        rms = np.sqrt(np.mean(audio**2))
        if rms > 0:
            audio = audio * (10 ** (scene.source_level_db / 20) / rms)
        images = enumerate_images(scene.room, src, max_order)
        array += _convolve_trim(audio, render_array_rir(images, atf, scene.receiver, c), n)
        reference += _convolve_trim(audio, render_sh_rir(images, order, scene.receiver, scene.sample_rate, c), n)
    meta = {
        "scene": scene.to_dict(),
        "order": order,
        "max_image_order": max_order,
        "clipping": {"array": bool(np.abs(array).max() > 1.0), "reference": bool(np.abs(reference).max() > 1.0)},
    }
    return SceneResult(array, reference, meta)


def _uniform_point(rng, room: RoomSpec, margin: float):
    lo = np.full(3, margin)
    hi = np.asarray(room.dims) - margin
    return tuple(float(v) for v in rng.uniform(lo, hi))


def random_scene(seed: int, duration=2.0, sample_rate=48000, dims_range=((3, 3, 2), (10, 10, 5)),
                 absorption_range=(0.2, 0.95), max_sources=5, wall_margin=0.5, speech_ratio=0.6) -> SceneSpec:
    """Draw a room, a receiver pose and one to five sources from ``seed``.

    One absorption coefficient is drawn per room and applied to all walls.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(float(v) for v in rng.uniform(dims_range[0], dims_range[1]))
    alpha = float(rng.uniform(*absorption_range))
    room = RoomSpec(dims, (alpha,) * 6)
    receiver = ReceiverPose(_uniform_point(rng, room, wall_margin), float(rng.uniform(0, 2 * np.pi)))
    n_src = int(rng.integers(1, max_sources + 1))
    sources = []
    while len(sources) < n_src:
        p = _uniform_point(rng, room, wall_margin)
        if np.linalg.norm(np.asarray(p) - receiver.position) >= 0.5:
            sources.append(p)
    kinds = ["speech" if rng.random() < speech_ratio else "nonspeech" for _ in sources]
    return SceneSpec(room, receiver, sources, seed, duration, sample_rate, source_kinds=kinds)


def synthetic_source(kind: str, n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Self-contained test signals.

    ``speech``: speech-shaped noise with syllabic (3-6 Hz) on/off envelope.
    ``nonspeech``: harmonic tone with vibrato, or coloured noise bursts.
    """
    t = np.arange(n) / fs
    if kind == "speech":
        noise = rng.standard_normal(n)
        b, a = sps.butter(2, [100 / (fs / 2), 4000 / (fs / 2)], btype="band")
        shaped = sps.lfilter(b, a, noise)
        # -6 dB/octave tilt above ~500 Hz
        b2, a2 = sps.butter(1, 500 / (fs / 2))
        shaped = 0.3 * shaped + sps.lfilter(b2, a2, shaped)
        rate = rng.uniform(3, 6)
        env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 0.7
        gate = np.repeat(rng.random(int(np.ceil(n / (0.4 * fs))) + 1) > 0.2, int(0.4 * fs))[:n]
        return shaped * env * gate
    if kind == "nonspeech":
        if rng.random() < 0.5:
            f0 = rng.uniform(110, 880)
            vib = 1 + 0.01 * np.sin(2 * np.pi * rng.uniform(4, 7) * t)
            phase = 2 * np.pi * np.cumsum(f0 * vib) / fs
            harmonics = np.arange(1, int(min(12, (fs / 2) // (f0 * 1.1))) + 1)
            amps = 1.0 / harmonics
            return (amps[:, None] * np.sin(harmonics[:, None] * phase[None, :])).sum(0)
        noise = rng.standard_normal(n)
        lo, hi = sorted(rng.uniform(50, 16000, size=2))
        hi = max(hi, lo * 1.5)
        b, a = sps.butter(2, [lo / (fs / 2), min(hi, 0.95 * fs / 2) / (fs / 2)], btype="band")
        burst_len = int(fs * rng.uniform(0.1, 0.5))
        gate = np.repeat(rng.random(n // burst_len + 1) > 0.4, burst_len)[:n]
        return sps.lfilter(b, a, noise) * gate
    raise ValueError(f"unknown source kind {kind!r}")


class WavPool:
    """Local audio pools by category (``speech``, ``nonspeech``) of mono WAV files."""

    def __init__(self, speech_dir=None, nonspeech_dir=None):
        self.files = {
            "speech": sorted(Path(speech_dir).glob("*.wav")) if speech_dir else [],
            "nonspeech": sorted(Path(nonspeech_dir).glob("*.wav")) if nonspeech_dir else [],
        }

    def draw(self, kind: str, n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
        files = self.files.get(kind, [])
        if not files:
            return synthetic_source(kind, n, fs, rng)
        data, file_fs = read_wav(files[int(rng.integers(len(files)))])
        if file_fs != fs:
            raise ValueError(f"pool file sample rate {file_fs} != {fs}")
        x = data.mean(axis=0)
        if len(x) < n:
            x = np.tile(x, int(np.ceil(n / len(x))))
        offset = int(rng.integers(0, len(x) - n + 1))
        return x[offset : offset + n]


def _scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _render_one(args):
    index, seed, atf, duration, order, max_order, pool, speech_ratio = args
    scene = random_scene(_scene_seed(seed, index), duration, atf.sample_rate, speech_ratio=speech_ratio)
    rng = np.random.default_rng(_scene_seed(scene.seed, 1))
    n = int(round(duration * atf.sample_rate))
    audio = [pool.draw(k, n, atf.sample_rate, rng) for k in scene.source_kinds]
    return index, synth_scene(scene, atf, audio, order, max_order)


def generate_dataset(out_dir, atf: ATFSet, num_scenes: int, duration=2.0, seed=0, order=1, max_order=20,
                     split=(0.8, 0.1, 0.1), pool: WavPool | None = None, workers: int = 1,
                     speech_ratio: float = 0.6) -> dict:
    """Write ``scene_<id>/{array,reference}.wav`` + ``meta.json`` and a split manifest.

    Every scene is fully determined by ``(seed, index)``; parallel workers
    give identical files.
    """
    if abs(sum(split) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = pool or WavPool()
    jobs = [(i, seed, atf, duration, order, max_order, pool, speech_ratio) for i in range(num_scenes)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            results = ex.map(_render_one, jobs)
            _write_scenes(out_dir, results, atf.sample_rate)
    else:
        _write_scenes(out_dir, map(_render_one, jobs), atf.sample_rate)

    perm = np.random.default_rng(seed).permutation(num_scenes)
    n_train = int(round(split[0] * num_scenes))
    n_val = int(round(split[1] * num_scenes))
    names = [f"scene_{i:05d}" for i in range(num_scenes)]
    manifest = {
        "seed": seed,
        "num_scenes": num_scenes,
        "duration": duration,
        "sample_rate": atf.sample_rate,
        "order": order,
        "max_image_order": max_order,
        "num_mics": atf.num_mics,
        "split_fractions": list(split),
        "speech_ratio": speech_ratio,
        "splits": {
            "train": sorted(names[i] for i in perm[:n_train]),
            "validation": sorted(names[i] for i in perm[n_train : n_train + n_val]),
            "test": sorted(names[i] for i in perm[n_train + n_val :]),
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _write_scenes(out_dir, results, fs):
    for index, res in results:
        d = out_dir / f"scene_{index:05d}"
        d.mkdir(exist_ok=True)
        write_wav(d / "array.wav", res.array, fs)
        write_wav(d / "reference.wav", res.reference, fs)
        (d / "meta.json").write_text(json.dumps(res.meta, indent=2))


def load_scene(scene_dir) -> SceneResult:
    scene_dir = Path(scene_dir)
    array, _ = read_wav(scene_dir / "array.wav")
    reference, _ = read_wav(scene_dir / "reference.wav")
    return SceneResult(array, reference, json.loads((scene_dir / "meta.json").read_text()))
