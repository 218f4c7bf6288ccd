# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # A simulated reverberant scene
#
# Draw a random shoebox room with a few sources, render the array signals
# and the first-order reference with the image-source method, then score
# the linear encoder with the evaluation metrics.

# %%
import numpy as np

from ambiforge.atf import synth_head_array_atf
from ambiforge.linenc import apply_encoder, design_linear_encoder
from ambiforge.objective import evaluate_signals
from ambiforge.roomsim import random_scene, synth_scene, synthetic_source
from ambiforge.sphere import uniform_grid
from ambiforge.stft import analyze, synthesize

atf = synth_head_array_atf(grid=uniform_grid(480))
enc = design_linear_encoder(atf, order=1)
spec = random_scene(seed=3, duration=2.0)
print("room", np.round(spec.room.dims, 2), "absorption", round(spec.room.absorption[0], 2))
print("sources", len(spec.sources), spec.source_kinds)

# %%
rng = np.random.default_rng(3)
audio = [synthetic_source(kind, 96000, 48000, rng) for kind in spec.source_kinds]
scene = synth_scene(spec, atf, audio, order=1, max_order=12)
print("array", scene.array.shape, "reference", scene.reference.shape, "clipping", scene.meta["clipping"])

# %% [markdown]
# Encode and compare with the reference: magnitude error, SI-SDR, SPME and
# the order-weighted coherence.

# %%
out = synthesize(apply_encoder(enc, analyze(scene.array)), scene.array.shape[1])
report = evaluate_signals(scene.reference, out, grid=uniform_grid(300))
print(f"magnitude error {report.magerr_db:.2f} dB, SI-SDR {report.sisdr_db:.2f} dB, "
      f"SPME {report.spme_db:.2f} dB, weighted coherence {report.coherence:.3f}")
