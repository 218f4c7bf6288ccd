"""Training loop for the neural encoder.

Batches are random fixed-length crops of whole scenes, redrawn every
epoch from a seeded generator whose state is checkpointed, so a resumed
run follows the uninterrupted trajectory exactly.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradkit as gk
from .ambinet import AmbiNet, AmbiNetConfig, NormStats, ResidualEncoder, apply_weights_graph, compute_norm_stats
from .ambinet import load_model, save_model
from .linenc import EncoderMatrix, apply_encoder
from .objective import LossConfig, coherence_report, total_loss, total_loss_tensor
from .roomsim import load_scene
from .stft import StftConfig, analyze, synthesize

__all__ = ["SceneStore", "TrainSettings", "TrainingError", "train", "batch_loss", "split_stats",
           "evaluate_encoders", "linear_outputs", "load_encoder_model"]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class SceneStore:
    """Time-domain array and reference signals of one dataset split."""

    def __init__(self, dataset_dir, split: str):
        self.root = Path(dataset_dir)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"dataset manifest {manifest_path} not found")
        self.manifest = json.loads(manifest_path.read_text())
        if split not in self.manifest["splits"]:
            raise ValueError(f"unknown split {split!r}")
        self.split = split
        self.names = list(self.manifest["splits"][split])
        self.arrays, self.references = [], []
        for name in self.names:
            scene = load_scene(self.root / name)
            self.arrays.append(scene.array.astype(np.float32))
            self.references.append(scene.reference.astype(np.float32))

    def __len__(self):
        return len(self.names)

    def manifest_digest(self) -> str:
        return hashlib.sha256((self.root / "manifest.json").read_bytes()).hexdigest()


def split_stats(store: SceneStore, config: StftConfig) -> NormStats:
    """Input statistics of a split, with the split and scenes recorded as provenance."""
    specs = (analyze(x, config) for x in store.arrays)
    prov = {"split": store.split, "num_scenes": len(store), "scenes": store.names,
            "manifest_sha256": store.manifest_digest()}
    return compute_norm_stats(specs, prov)


@dataclass
class TrainSettings:
    epochs: int = 250
    batch_size: int = 128
    segment_seconds: float = 1.0
    lr: float = 1e-3
    lr_factor: float = 0.3
    patience: int = 10
    seed: int = 0
    mode: str = "residual"
    model: dict = field(default_factory=lambda: {"bins_per_block": 5, "hidden": 512, "gru_layers": 2})


def _batch_arrays(store, indices, offsets, seg, enc, config):
    P, A, L = [], [], []
    for i, o in zip(indices, offsets):
        p = analyze(store.arrays[i][:, o : o + seg].astype(float), config)
        P.append(p.values)
        A.append(analyze(store.references[i][:, o : o + seg].astype(float), config).values)
        L.append(apply_encoder(enc, p).values)
    return np.stack(P), np.stack(A), np.stack(L)


def batch_loss(net: AmbiNet, stats: NormStats, mode: str, P, A, L, loss_cfg: LossConfig) -> gk.Tensor:
    """Loss of a batch ``P[b, mic, t, f]`` against ``A[b, sh, t, f]``.

    In residual mode the linear output ``L[b, sh, t, f]`` is added in the
    STFT domain, which equals the time-domain sum on the shared frame grid.
    """
    Pn = P / stats.std
    W = net.weights_graph(Pn.real, Pn.imag)
    re, im = apply_weights_graph(W, P.real, P.imag)
    if mode == "residual":
        Lt = L.transpose(0, 2, 3, 1)
        re, im = re + Lt.real, im + Lt.imag
    At = A.transpose(0, 2, 3, 1)
    return total_loss_tensor(re, im, At.real, At.imag, loss_cfg)


def linear_outputs(enc: EncoderMatrix, store: SceneStore) -> list[np.ndarray]:
    return [synthesize(apply_encoder(enc, analyze(x.astype(float), StftConfig(sample_rate=enc.sample_rate))),
                       x.shape[1]) for x in store.arrays]


def evaluate_encoders(store: SceneStore, outputs: dict, config: StftConfig) -> dict:
    """Mean total loss and weighted coherence of time-domain outputs per encoder."""
    loss_cfg = LossConfig.for_stft(config, int(np.sqrt(store.references[0].shape[0])) - 1)
    result = {}
    for name, outs in outputs.items():
        losses, cohs = [], []
        for ref, out in zip(store.references, outs):
            A = analyze(ref.astype(float), config)
            Ah = analyze(out, config)
            losses.append(total_loss(A, Ah, loss_cfg))
            cohs.append(coherence_report(A, Ah).weighted)
        result[name] = {"loss": float(np.mean(losses)), "coherence": float(np.mean(cohs))}
    return result


def _validation_loss(net, stats, mode, store, enc, config, loss_cfg):
    losses = []
    for i in range(len(store)):
        P, A, L = _batch_arrays(store, [i], [0], store.arrays[i].shape[1], enc, config)
        losses.append(float(batch_loss(net, stats, mode, P, A, L, loss_cfg).value))
    return float(np.mean(losses))


def train(train_store: SceneStore, val_store: SceneStore, enc: EncoderMatrix, settings: TrainSettings,
          out_dir, resume: bool = False, stop_after: int | None = None) -> dict:
    """Train one model and keep the lowest-validation-loss checkpoint.

    Writes ``best.*`` (model), ``last.*`` (model, optimizer, scheduler and
    generator state) and ``history.json`` into ``out_dir``. ``stop_after``
    ends the run after that many epochs in this call (used to test resume).
    """
    if settings.mode not in ("residual", "standalone"):
        raise ValueError(f"unknown mode {settings.mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = StftConfig(sample_rate=enc.sample_rate)
    loss_cfg = LossConfig.for_stft(config, enc.order)
    seg = int(round(settings.segment_seconds * config.sample_rate))
    if any(x.shape[1] < seg for x in train_store.arrays):
        raise ValueError("segment length exceeds a training scene")

    if resume and (out_dir / "last.json").exists():
        net, stats, ck = load_model(out_dir / "last")
        opt = gk.Adam(net.params, **{k: ck["optimizer"][k] for k in ("lr", "beta1", "beta2", "eps")})
        opt.step_count = ck["optimizer"]["step"]
        opt.m, opt.v = ck["adam_m"], ck["adam_v"]
        sched = gk.PlateauScheduler(opt, ck["scheduler"]["factor"], ck["scheduler"]["patience"])
        sched.best, sched.bad_epochs = ck["scheduler"]["best"], ck["scheduler"]["bad_epochs"]
        state = ck["extra"]["train_state"]
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        start, history, best_val = state["epoch"], state["history"], state["best_val"]
    else:
        stats = split_stats(train_store, config)
        cfg = AmbiNetConfig(enc.num_mics, enc.order, config.num_bins, **settings.model)
        net = AmbiNet(cfg, seed=settings.seed)
        opt = gk.Adam(net.params, lr=settings.lr)
        sched = gk.PlateauScheduler(opt, settings.lr_factor, settings.patience)
        rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 1]))
        start, history, best_val = 0, [], np.inf

    epochs_run = 0
    for epoch in range(start, settings.epochs):
        if stop_after is not None and epochs_run >= stop_after:
            break
        order = rng.permutation(len(train_store))
        offsets = [int(rng.integers(0, train_store.arrays[i].shape[1] - seg + 1)) for i in order]
        train_losses = []
        for step, s in enumerate(range(0, len(order), settings.batch_size)):
            idx = order[s : s + settings.batch_size]
            P, A, L = _batch_arrays(train_store, idx, offsets[s : s + settings.batch_size], seg, enc, config)
            try:
                loss = batch_loss(net, stats, settings.mode, P, A, L, loss_cfg)
                opt.zero_grad()
                loss.backward()
                opt.step()
            except gk.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch + 1}, step {step + 1}: {exc}") from exc
            train_losses.append(float(loss.value))
        val = _validation_loss(net, stats, settings.mode, val_store, enc, config, loss_cfg)
        lr_used = opt.lr
        sched.step(val)
        history.append({"epoch": epoch + 1, "train_loss": float(np.mean(train_losses)), "val_loss": val,
                        "lr": lr_used})
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch + 1, history[-1]["train_loss"], val, lr_used)
        if val < best_val:
            best_val = val
            save_model(out_dir / "best", net, stats, extra={"mode": settings.mode, "epoch": epoch + 1,
                                                            "val_loss": val})
        state = {"epoch": epoch + 1, "history": history, "best_val": best_val, "rng": rng.bit_generator.state}
        save_model(out_dir / "last", net, stats, opt, sched, extra={"mode": settings.mode, "train_state": state})
        epochs_run += 1

    (out_dir / "history.json").write_text(json.dumps(history, indent=1))
    return {"history": history, "best_val": best_val}


def load_encoder_model(ckpt, linear: EncoderMatrix) -> ResidualEncoder:
    net, stats, ck = load_model(ckpt)
    return ResidualEncoder(linear, net, stats, ck["extra"].get("mode", "residual"))

