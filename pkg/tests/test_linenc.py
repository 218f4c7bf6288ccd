import numpy as np
import pytest
from helpers import pinv_oracle

from ambiforge.atf import ATFSet, synth_sphere_atf
from ambiforge.linenc import EncoderMatrix, apply_encoder, design_linear_encoder, load_encoder, save_encoder
from ambiforge.objective import coherence
from ambiforge.sphere import eval_real_sh, uniform_grid
from ambiforge.stft import Spectrogram, StftConfig, analyze


@pytest.fixture(scope="module")
def sphere_atf():
    grid = uniform_grid(240)
    mics = uniform_grid(8)
    return synth_sphere_atf(0.05, (mics.azimuth, mics.inclination), grid, ir_len=256, model="rigid")


def test_uncapped_matches_pseudo_inverse(sphere_atf):
    enc = design_linear_encoder(sphere_atf, 1, max_gain_db=np.inf, diffuse_eq=False)
    H = sphere_atf.frequency_response(enc.frequencies)
    Y = eval_real_sh(1, sphere_atf.grid)
    for f in (20, 60, 150, 300):
        ref = pinv_oracle(H[f], Y, sphere_atf.grid.weights)
        assert np.linalg.norm(enc.E[f] - ref) <= 1e-8 * np.linalg.norm(ref)


def test_gain_cap_and_monotonicity(sphere_atf):
    smax = {}
    for cap in (30.0, 20.0, 10.0):
        enc = design_linear_encoder(sphere_atf, 1, max_gain_db=cap)
        smax[cap] = enc.max_singular_values()
        assert np.all(smax[cap] <= 10 ** (cap / 20) * (1 + 1e-6))
    # without EQ the Tikhonov path alone is monotone in the cap
    plain = {c: design_linear_encoder(sphere_atf, 1, max_gain_db=c, diffuse_eq=False).max_singular_values()
             for c in (30.0, 20.0, 10.0)}
    assert np.all(plain[20.0] <= plain[30.0] * (1 + 1e-9))
    assert np.all(plain[10.0] <= plain[20.0] * (1 + 1e-9))
    # the bisection lands on the cap wherever it binds
    assert plain[10.0].max() == pytest.approx(10**0.5, rel=1e-6)


def test_diffuse_eq_flattens_response(sphere_atf):
    enc = design_linear_encoder(sphere_atf, 1, max_gain_db=np.inf)
    H = sphere_atf.frequency_response(enc.frequencies)
    resp = np.einsum("fkm,fmd->fkd", enc.E, H)
    rms = np.sqrt(np.einsum("d,fkd->fk", sphere_atf.grid.weights, np.abs(resp) ** 2))
    band = slice(2, 200)
    assert np.allclose(rms[band], rms[band][0], rtol=1e-9)


def test_errors(sphere_atf):
    zero = ATFSet(np.zeros_like(sphere_atf.irs), sphere_atf.grid, sphere_atf.sample_rate)
    with pytest.raises(ValueError):
        design_linear_encoder(zero, 1)
    with pytest.raises(ValueError):
        design_linear_encoder(sphere_atf, 2)
    with pytest.raises(ValueError):
        design_linear_encoder(sphere_atf, 1, stft_config=StftConfig(sample_rate=16000))
    with pytest.raises(ValueError):
        EncoderMatrix(1, [0.0, 1.0], np.zeros((2, 3, 5)), 48000)


def test_apply_identity_zero_and_linearity():
    rng = np.random.default_rng(0)
    cfg = StftConfig()
    F = cfg.num_bins
    ident = EncoderMatrix(1, cfg.frequencies, np.broadcast_to(np.eye(4), (F, 4, 4)), 48000)
    p = analyze(rng.standard_normal((4, 3000)), cfg)
    assert np.array_equal(apply_encoder(ident, p).values, p.values)
    E = rng.standard_normal((F, 4, 5)) + 1j * rng.standard_normal((F, 4, 5))
    enc = EncoderMatrix(1, cfg.frequencies, E, 48000)
    x, y = rng.standard_normal((2, 5, 3000))
    px, py = analyze(x, cfg), analyze(y, cfg)
    lhs = apply_encoder(enc, px.with_values(2 * px.values + py.values)).values
    rhs = 2 * apply_encoder(enc, px).values + apply_encoder(enc, py).values
    assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(rhs).max()
    assert not np.any(apply_encoder(enc, analyze(np.zeros((5, 3000)), cfg)).values)
    # naive per-(t, f) multiply
    out = apply_encoder(enc, px).values
    for t, f in [(0, 0), (3, 100), (8, 384)]:
        assert np.allclose(out[:, t, f], E[f] @ px.values[:, t, f], atol=1e-12)
    with pytest.raises(ValueError):
        apply_encoder(enc, p)


def test_plane_wave_coherence_open_sphere():
    grid = uniform_grid(400)
    mics = uniform_grid(32)
    atf = synth_sphere_atf(0.042, (mics.azimuth, mics.inclination), grid, ir_len=512, model="open")
    enc = design_linear_encoder(atf, 1)
    cfg = StftConfig()
    rng = np.random.default_rng(1)
    H = atf.frequency_response(cfg.frequencies)
    # random plane waves taken from the grid, each with its own random spectrum over frames
    dirs = rng.choice(len(grid), 10, replace=False)
    S = rng.standard_normal((len(dirs), 20, cfg.num_bins)) + 1j * rng.standard_normal((len(dirs), 20, cfg.num_bins))
    P = np.einsum("fmd,dtf->mtf", H[:, :, dirs], S)
    A = np.einsum("kd,dtf->ktf", eval_real_sh(1, grid)[:, dirs], S)
    ahat = apply_encoder(enc, Spectrogram(P, cfg)).values
    coh = coherence(A, ahat)
    band = (cfg.frequencies >= 200) & (cfg.frequencies <= 2000)
    assert coh[:, band].min() > 0.99


def test_save_load_roundtrip(tmp_path, sphere_atf):
    enc = design_linear_encoder(sphere_atf, 1)
    save_encoder(enc, tmp_path / "e.enc")
    back = load_encoder(tmp_path / "e.enc")
    assert np.array_equal(back.E, enc.E)
    assert back.order == 1 and back.max_gain_db == 20.0 and back.diffuse_eq
    raw = (tmp_path / "e.enc").read_bytes()
    (tmp_path / "bad.enc").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_encoder(tmp_path / "bad.enc")
    (tmp_path / "bad.enc").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        load_encoder(tmp_path / "bad.enc")
