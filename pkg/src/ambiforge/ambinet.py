"""Neural Ambisonic encoder and its residual combination with a linear encoder.

The network maps normalized microphone STFT coefficients to real-valued
per-frame encoding matrices ``W[t, f, sh, mic]``:

1. a 3x3 convolution per frequency bin over (microphone, time) with the
   real and imaginary parts as two channels, causal in time;
2. single-head self-attention across frequency blocks of ``B`` adjacent
   bins, each token holding the ``B * M * 2`` block values of one frame;
3. summation over microphones, leaving ``2F`` features per frame;
4. a stack of unidirectional GRUs;
5. a dense head to ``F * (N+1)^2 * M`` weights, initialized to zero.

The weights are applied to the original (un-normalized) coefficients.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradkit as gk
from .linenc import EncoderMatrix, apply_encoder
from .sphere import num_sh
from .stft import Spectrogram, StftConfig, analyze, synthesize

__all__ = [
    "AmbiNetConfig",
    "NormStats",
    "AmbiNet",
    "ResidualEncoder",
    "compute_norm_stats",
    "normalize_input",
    "apply_weights",
    "apply_weights_graph",
    "save_model",
    "load_model",
]

STD_FLOOR = 1e-8


@dataclass
class AmbiNetConfig:
    num_mics: int
    order: int = 1
    num_bins: int = 385
    bins_per_block: int = 5
    hidden: int = 512
    gru_layers: int = 2

    def __post_init__(self):
        for name in ("num_mics", "num_bins", "bins_per_block", "hidden", "gru_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.order < 0:
            raise ValueError("order must be non-negative")

    @property
    def num_sh(self) -> int:
        return num_sh(self.order)

    @property
    def num_blocks(self) -> int:
        return -(-self.num_bins // self.bins_per_block)

    @property
    def embed_dim(self) -> int:
        return self.bins_per_block * self.num_mics * 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AmbiNetConfig":
        return cls(**d)


@dataclass
class NormStats:
    """Per-bin standard deviation of the real/imaginary input parts.

    ``provenance`` records which data produced the statistics.
    """

    std: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.std = np.maximum(np.asarray(self.std, dtype=float), STD_FLOOR)

    def to_dict(self) -> dict:
        return {"std": self.std.tolist(), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["std"]), d.get("provenance", {}))


def compute_norm_stats(spectrograms, provenance: dict | None = None) -> NormStats:
    """Pool ``|p|^2 / 2`` over channels and frames of every spectrogram, per bin."""
    total, count = None, 0
    for p in spectrograms:
        v = p.values if isinstance(p, Spectrogram) else np.asarray(p)
        s = np.sum(np.abs(v) ** 2, axis=(0, 1)) / 2
        total = s if total is None else total + s
        count += v.shape[0] * v.shape[1]
    if total is None:
        raise ValueError("no spectrograms given for normalization statistics")
    return NormStats(np.sqrt(total / count), provenance or {})


def normalize_input(p: Spectrogram, stats: NormStats | None) -> Spectrogram:
    if stats is None:
        raise ValueError("normalization statistics are missing")
    if p.normalized:
        raise ValueError("spectrogram is already normalized")
    if len(stats.std) != p.num_bins:
        raise ValueError(f"statistics cover {len(stats.std)} bins, spectrogram has {p.num_bins}")
    out = p.with_values(p.values / stats.std)
    out.normalized = True
    return out


def apply_weights(W, p: Spectrogram) -> Spectrogram:
    """``a_hat(t, f) = W[t, f] p(t, f)`` with real ``W[t, f, sh, mic]``."""
    W = np.asarray(W)
    if W.ndim != 4 or W.shape[0] != p.num_frames or W.shape[1] != p.num_bins or W.shape[3] != p.num_channels:
        raise ValueError(f"weights {W.shape} do not match spectrogram {p.values.shape}")
    out = p.with_values(np.einsum("tfkm,mtf->ktf", W, p.values))
    out.normalized = False
    return out


class AmbiNet:
    """Parameters and forward pass; ``params`` maps names to gradkit tensors."""

    def __init__(self, config: AmbiNetConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else self.init_params(config, np.random.default_rng(seed))
        self._check_params()

    @staticmethod
    def init_params(cfg: AmbiNetConfig, rng: np.random.Generator) -> dict:
        F, E, H = cfg.num_bins, cfg.embed_dim, cfg.hidden

        def uniform(shape, fan_in):
            k = 1.0 / np.sqrt(fan_in)
            return gk.Tensor(rng.uniform(-k, k, shape), requires_grad=True)

        p = {"conv_w": uniform((F, 2, 2, 3, 3), 18), "conv_b": uniform((F, 2), 18)}
        for name in "qkvo":
            p[f"att_{name}_w"] = uniform((E, E), E)
            # a key bias only shifts each score row by a constant, which softmax ignores
            if name != "k":
                p[f"att_{name}_b"] = uniform((E,), E)
        size = 2 * F
        for layer in range(cfg.gru_layers):
            p.update(gk.init_gru_params(size, H, rng, prefix=f"gru{layer}_"))
            size = H
        out = F * cfg.num_sh * cfg.num_mics
        p["head_w"] = gk.Tensor(np.zeros((H, out)), requires_grad=True)
        p["head_b"] = gk.Tensor(np.zeros(out), requires_grad=True)
        return p

    def _check_params(self):
        expected = {k: v.shape for k, v in self.init_params(self.config, np.random.default_rng(0)).items()}
        got = {k: v.shape for k, v in self.params.items()}
        if expected != got:
            raise ValueError("parameter shapes do not match the configuration")
        for k, v in self.params.items():
            if not np.all(np.isfinite(v.value)):
                raise ValueError(f"parameter {k} is not finite")

    def num_parameters(self) -> int:
        return int(sum(v.value.size for v in self.params.values()))

    def weights_graph(self, x_re, x_im) -> gk.Tensor:
        """Differentiable forward for a batch ``x[batch, mic, frame, bin]``.

        Returns ``W[batch, frame, bin, sh, mic]``.
        """
        cfg, p = self.config, self.params
        x_re, x_im = np.asarray(x_re, dtype=float), np.asarray(x_im, dtype=float)
        Bn, M, T, F = x_re.shape
        if M != cfg.num_mics or F != cfg.num_bins:
            raise ValueError(f"input has {M} mics and {F} bins, model expects {cfg.num_mics} and {cfg.num_bins}")
        # [batch, bin, re/im, mic, frame]
        x = np.stack([x_re, x_im], axis=1).transpose(0, 4, 1, 2, 3)
        h = gk.conv2d_3x3_grouped(gk.Tensor(x), p["conv_w"], p["conv_b"], causal=True)

        # tokens: one per (frame, block) holding B bins x M mics x re/im
        Bb, nb, E = cfg.bins_per_block, cfg.num_blocks, cfg.embed_dim
        h = gk.transpose(h, (0, 4, 1, 3, 2))  # [batch, frame, bin, mic, re/im]
        if nb * Bb != F:
            h = gk.pad(h, ((0, 0), (0, 0), (0, nb * Bb - F), (0, 0), (0, 0)))
        tok = gk.reshape(h, (Bn, T, nb, E))
        q = tok @ p["att_q_w"] + p["att_q_b"]
        k = tok @ p["att_k_w"]
        v = tok @ p["att_v_w"] + p["att_v_b"]
        scores = gk.scale(q @ gk.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(E))
        att = gk.softmax(scores, axis=-1) @ v
        tok = tok + (att @ p["att_o_w"] + p["att_o_b"])

        h = gk.reshape(tok, (Bn, T, nb * Bb, M, 2))
        if nb * Bb != F:
            h = h[:, :, :F]
        h = gk.reshape(gk.sum_axis(h, axis=3), (Bn, T, 2 * F))
        for layer in range(cfg.gru_layers):
            h = gk.gru_layer(h, p, prefix=f"gru{layer}_")
        w = h @ p["head_w"] + p["head_b"]
        return gk.reshape(w, (Bn, T, F, cfg.num_sh, M))

    def forward(self, p_norm: Spectrogram) -> np.ndarray:
        """Encoding weights ``W[frame, bin, sh, mic]`` for one normalized spectrogram."""
        if not p_norm.normalized:
            raise ValueError("forward expects a normalized spectrogram")
        v = p_norm.values[None]
        return self.weights_graph(v.real, v.imag).value[0]


def apply_weights_graph(W: gk.Tensor, p_re, p_im) -> tuple[gk.Tensor, gk.Tensor]:
    """Batched differentiable :func:`apply_weights`; ``p[batch, mic, frame, bin]``.

    Returns the real and imaginary parts of ``a_hat[batch, frame, bin, sh]``.
    """
    p_re = np.asarray(p_re).transpose(0, 2, 3, 1)
    p_im = np.asarray(p_im).transpose(0, 2, 3, 1)
    return gk.einsum("btfkm,btfm->btfk", W, p_re), gk.einsum("btfkm,btfm->btfk", W, p_im)


@dataclass
class ResidualEncoder:
    """Linear and neural encoders run in parallel, outputs summed.

    ``mode="standalone"`` drops the linear path.
    """

    linear: EncoderMatrix
    net: AmbiNet
    stats: NormStats
    mode: str = "residual"
    stft_config: StftConfig | None = None

    def __post_init__(self):
        if self.mode not in ("residual", "standalone"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.stft_config = self.stft_config or StftConfig(sample_rate=self.linear.sample_rate)
        cfg = self.net.config
        if self.stft_config.sample_rate != self.linear.sample_rate:
            raise ValueError("STFT and linear encoder sample rates differ")
        if len(self.linear.frequencies) != cfg.num_bins or self.stft_config.num_bins != cfg.num_bins:
            raise ValueError("bin counts of linear encoder, network and STFT differ")
        if self.linear.num_mics != cfg.num_mics or self.linear.order != cfg.order:
            raise ValueError("linear encoder and network disagree on microphones or order")
        if len(self.stats.std) != cfg.num_bins:
            raise ValueError("normalization statistics do not match the bin count")

    def neural_part(self, P: Spectrogram) -> Spectrogram:
        return apply_weights(self.net.forward(normalize_input(P, self.stats)), P)

    def encode(self, p_time, sample_rate: float | None = None) -> np.ndarray:
        """``[mics, samples]`` in, ``[(N+1)^2, samples]`` out."""
        if sample_rate is not None and sample_rate != self.stft_config.sample_rate:
            raise ValueError(f"input sample rate {sample_rate} differs from design rate {self.stft_config.sample_rate}")
        p_time = np.atleast_2d(np.asarray(p_time, dtype=float))
        n = p_time.shape[1]
        try:
            P = analyze(p_time, self.stft_config)
        except ValueError as exc:
            raise ValueError(f"analysis: {exc}") from exc
        try:
            out = synthesize(self.neural_part(P), n)
        except ValueError as exc:
            raise ValueError(f"neural encoder: {exc}") from exc
        if self.mode == "residual":
            try:
                out = out + synthesize(apply_encoder(self.linear, P), n)
            except ValueError as exc:
                raise ValueError(f"linear encoder: {exc}") from exc
        return out


def save_model(path, net: AmbiNet, stats: NormStats, optimizer=None, scheduler=None, extra: dict | None = None):
    """gradkit checkpoint with the network configuration and input statistics in the manifest."""
    meta = dict(extra or {})
    meta["ambinet_config"] = net.config.to_dict()
    meta["norm_stats"] = stats.to_dict()
    gk.save_checkpoint(path, net.params, optimizer, scheduler, meta)


def load_model(path) -> tuple[AmbiNet, NormStats, dict]:
    """Returns the network, its statistics and the raw checkpoint dictionary."""
    ck = gk.load_checkpoint(path)
    extra = ck["extra"]
    if "ambinet_config" not in extra or "norm_stats" not in extra:
        raise ValueError(f"{path} is not an AmbiNet checkpoint")
    cfg = AmbiNetConfig.from_dict(extra["ambinet_config"])
    params = {k: gk.Tensor(v, requires_grad=True) for k, v in ck["params"].items()}
    return AmbiNet(cfg, params), NormStats.from_dict(extra["norm_stats"]), ck
