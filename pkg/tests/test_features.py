import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import solve_toeplitz

from conftest import tone
from gated_paraling.audio_io import AudioClip
from gated_paraling.errors import EmptyInput, UnsupportedFormat
from gated_paraling.features import (
    LAYOUT,
    N_FEATURES,
    N_FRAMES,
    FeatureMatrix,
    FrameConfig,
    _levinson,
    _lsp_from_lpc,
    append_deltas,
    assemble_feature_matrix,
    compute_fold_stats,
    extract_lld,
    frame_signal,
    lld_matrix,
    mel_filterbank,
    read_cache,
    write_cache,
)

ROW = LAYOUT.index


def _voiced(m):
    return m[ROW("f0_final")] > 0


# -- layout and framing ---------------------------------------------------------------------


def test_layout_has_38_names_and_76_with_deltas():
    assert len(LAYOUT.names) == 38
    assert len(LAYOUT.all_names) == 76
    assert len(set(LAYOUT.all_names)) == 76
    assert LAYOUT.all_names[38] == "delta_loudness"


def test_frame_sizes_at_both_rates():
    assert FrameConfig().sizes(16000) == (400, 160)
    assert FrameConfig().sizes(44100) == (1102, 441)


def test_four_seconds_give_397_frames_after_truncation():
    frames = frame_signal(tone(seconds=4.0))
    assert len(frames) == (64000 - 400) // 160 + 1 == 398
    assert lld_matrix(tone(seconds=4.0)).shape == (76, 397)


def test_short_clip_gets_one_padded_frame():
    frames = frame_signal(AudioClip(np.ones(100) * 0.1, 16000))
    assert frames.raw.shape == (1, 400)
    np.testing.assert_array_equal(frames.raw[0, 100:], 0.0)


def test_windowed_frames_use_hamming():
    clip = tone(seconds=0.1)
    frames = frame_signal(clip)
    np.testing.assert_allclose(frames.windowed[3], clip.samples[480:880] * np.hamming(400))


# -- pitch and voice quality ---------------------------------------------------------------------


@pytest.mark.parametrize("sr", [16000, 44100])
def test_440hz_tone_pitch_and_jitter(sr):
    m = lld_matrix(tone(440.0, seconds=2.0, sr=sr))
    voiced = _voiced(m)
    assert voiced.mean() > 0.9
    f0 = m[ROW("f0_final")][voiced]
    assert np.mean(np.abs(f0 - 440.0) <= 5.0) >= 0.95
    assert np.mean(m[ROW("jitter_local")][voiced]) < 0.005


@pytest.mark.parametrize("freq", [90.0, 120.0, 180.0, 250.0, 400.0])
def test_harmonic_tone_pitch(freq):
    t = np.arange(32000) / 16000
    x = sum(np.sin(2 * np.pi * h * freq * t) / h for h in range(1, 6)) * 0.2
    m = lld_matrix(AudioClip(x, 16000))
    f0 = m[ROW("f0_final")][_voiced(m)]
    assert f0.size > 150
    assert abs(np.median(f0) - freq) < 0.02 * freq


def test_silence_is_finite_and_quiet():
    m = lld_matrix(AudioClip(np.zeros(16000), 16000))
    assert np.all(np.isfinite(m))
    assert np.max(m[ROW("loudness")]) <= 1e-6
    assert not _voiced(m).any()


def test_white_noise_is_mostly_unvoiced(rng):
    m = lld_matrix(AudioClip(0.1 * rng.standard_normal(32000), 16000))
    assert _voiced(m).mean() < 0.05


def test_jitter_grows_with_period_perturbation(rng):
    def pulse_train(jitter):
        sr, f0 = 16000, 150.0
        out = np.zeros(sr * 2)
        pos = 0.0
        while pos < out.size - 200:
            period = sr / f0 * (1 + jitter * rng.standard_normal())
            i = int(pos)
            out[i : i + 60] += np.hanning(60) * np.sin(np.arange(60) * 0.6)
            pos += period
        return AudioClip(out * 0.3, sr)

    clean = lld_matrix(pulse_train(0.0))
    rough = lld_matrix(pulse_train(0.04))
    j = ROW("jitter_local")
    assert rough[j][_voiced(rough)].mean() > 2 * clean[j][_voiced(clean)].mean()


def test_shimmer_grows_with_amplitude_modulation():
    t = np.arange(32000) / 16000
    steady = AudioClip(0.3 * np.sin(2 * np.pi * 200 * t), 16000)
    wobbly = AudioClip(0.3 * (1 + 0.5 * np.sin(2 * np.pi * 13 * t)) / 1.5 * np.sin(2 * np.pi * 200 * t), 16000)
    s = ROW("shimmer_local")
    a, b = lld_matrix(steady), lld_matrix(wobbly)
    assert b[s][_voiced(b)].mean() > 5 * a[s][_voiced(a)].mean()


def test_f0_envelope_holds_last_voiced_value():
    x = np.concatenate([tone(200.0, seconds=0.5).samples, np.zeros(8000)])
    m = lld_matrix(AudioClip(x, 16000))
    voiced = _voiced(m)
    last = np.nonzero(voiced)[0][-1]
    env = m[ROW("f0_envelope")]
    assert np.all(env[last:] == m[ROW("f0_final")][last])
    assert not voiced[-10:].any()


def test_voicing_probability_lies_in_unit_interval(rng):
    m = lld_matrix(AudioClip(0.2 * rng.standard_normal(8000), 16000))
    v = m[ROW("voicing_prob")]
    assert np.all((v >= 0) & (v <= 1))


# -- spectral rows ----------------------------------------------------------------------


def test_mel_filterbank_shape_and_peaks():
    fb = mel_filterbank(26, 512, 16000)
    assert fb.shape == (26, 257)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0.5)
    assert np.all(fb.max(axis=1) <= 1.0)


def test_mfcc_equals_orthonormal_dct_of_log_mel():
    clip = AudioClip(0.1 * np.random.default_rng(0).standard_normal(4000), 16000)
    frames = frame_signal(clip)
    m = extract_lld(frames)
    power = np.abs(np.fft.rfft(frames.windowed, 512, axis=1)) ** 2
    logmel = np.log(np.maximum(power @ mel_filterbank(26, 512, 16000).T, 1e-12))
    n = 26
    k = np.arange(15)[:, None]
    basis = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * np.arange(n) + 1) / (2 * n))
    basis[0] /= np.sqrt(2.0)
    np.testing.assert_allclose(m[1:16], basis @ logmel.T, rtol=1e-9, atol=1e-9)


def test_tone_energy_lands_in_its_mel_band():
    fb = mel_filterbank(8, 512, 16000, 0.0, 8000.0)
    m = lld_matrix(tone(1000.0, seconds=0.5))
    bands = m[ROW("logMelBand[0]") : ROW("logMelBand[0]") + 8].mean(axis=1)
    bin_1k = int(round(1000 * 512 / 16000))
    assert np.argmax(bands) == np.argmax(fb[:, bin_1k])


def test_levinson_matches_toeplitz_solve(rng):
    x = rng.standard_normal((5, 400))
    r = np.array([[np.dot(row[: 400 - k], row[k:]) for k in range(9)] for row in x])
    a = _levinson(r, 8)
    for i in range(5):
        expected = solve_toeplitz(r[i, :8], -r[i, 1:9])
        np.testing.assert_allclose(a[i, 1:], expected, rtol=1e-8, atol=1e-10)


def test_lsp_matches_polynomial_roots(rng):
    # a stable order-8 predictor built from known pole pairs
    radii = rng.uniform(0.5, 0.95, 4)
    angles = np.sort(rng.uniform(0.2, 2.9, 4))
    poles = np.concatenate([radii * np.exp(1j * angles), radii * np.exp(-1j * angles)])
    a = np.real(np.poly(poles))
    lsp = _lsp_from_lpc(a[None], grid=4096)[0]

    ext = np.r_[a, 0.0]
    p = ext + ext[::-1]
    q = ext - ext[::-1]
    ang = np.concatenate([np.angle(np.roots(p)), np.angle(np.roots(q))])
    expected = np.sort(ang[(ang > 1e-6) & (ang < np.pi - 1e-6)])
    np.testing.assert_allclose(lsp, expected, atol=1e-5)
    assert np.all(np.diff(lsp) > 0)


def test_lsp_rows_are_ordered_in_open_interval():
    m = lld_matrix(AudioClip(0.1 * np.random.default_rng(3).standard_normal(16000), 16000))
    lsp = m[ROW("lspFreq[0]") : ROW("lspFreq[0]") + 8]
    assert np.all(np.diff(lsp, axis=0) > 0)
    assert np.all((lsp > 0) & (lsp < np.pi))


# -- deltas ---------------------------------------------------------------------------------


def _delta_oracle(row, window=2):
    t = row.size
    out = np.zeros(t)
    for i in range(t):
        acc = 0.0
        for k in range(1, window + 1):
            acc += k * (row[min(i + k, t - 1)] - row[max(i - k, 0)])
        out[i] = acc / (2 * sum(k * k for k in range(1, window + 1)))
    return out


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40))
def test_deltas_match_regression_formula(values):
    row = np.array(values)
    full = append_deltas(row[None])
    np.testing.assert_array_equal(full[0], row)
    np.testing.assert_allclose(full[1], _delta_oracle(row), atol=1e-9)


def test_delta_of_ramp_is_its_slope():
    ramp = 3.0 * np.arange(20.0)
    d = append_deltas(ramp[None])[1]
    np.testing.assert_allclose(d[2:-2], 3.0)


# -- assembly and normalization -----------------------------------------------------------------


def test_assembly_pads_with_zeros():
    lld = np.ones((76, 120))
    fm = assemble_feature_matrix(lld)
    assert fm.values.shape == (N_FEATURES, N_FRAMES)
    assert fm.n_valid == 120
    np.testing.assert_array_equal(fm.values[:, 120:], 0.0)


def test_assembly_truncates():
    fm = assemble_feature_matrix(np.arange(76 * 500.0).reshape(76, 500))
    assert fm.n_valid == 397
    np.testing.assert_array_equal(fm.values[:, -1], np.arange(76) * 500 + 396)


def test_fold_stats_normalize_training_data(rng):
    mats = [rng.normal(5.0, 3.0, (76, n)) for n in (397, 200, 50)]
    stats = compute_fold_stats(mats)
    z = np.concatenate([assemble_feature_matrix(m, stats).values[:, : m.shape[1]] for m in mats], axis=1)
    np.testing.assert_allclose(z.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=1), 1.0, atol=1e-9)


def test_fold_stats_use_only_valid_columns_of_feature_matrices():
    fm = assemble_feature_matrix(np.full((76, 10), 2.0))
    stats = compute_fold_stats([fm])
    np.testing.assert_allclose(stats.mean, 2.0)
    np.testing.assert_allclose(stats.std, 0.0)


def test_constant_row_hits_the_std_floor():
    stats = compute_fold_stats([np.full((76, 5), 1.0)])
    fm = assemble_feature_matrix(np.full((76, 5), 1.0 + 1e-3), stats)
    assert np.all(np.isfinite(fm.values))
    np.testing.assert_allclose(fm.values[:, :5], 1e3, rtol=1e-6)


def test_empty_stats_raise():
    with pytest.raises(EmptyInput):
        compute_fold_stats([])


def test_feature_matrix_validation():
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((76, 396)), 0)
    bad = np.zeros((76, 397))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        FeatureMatrix(bad, 1)


@given(st.integers(0, 2**32 - 1), st.integers(50, 12000), st.floats(0.0, 0.9))
def test_descriptors_are_finite_for_any_signal(seed, n, amp):
    x = amp * np.random.default_rng(seed).uniform(-1, 1, n)
    m = lld_matrix(AudioClip(x, 16000))
    assert m.shape[0] == 76 and 1 <= m.shape[1] <= 397
    assert np.all(np.isfinite(m))


# -- cache files -------------------------------------------------------------------------------


def test_cache_roundtrip_and_header(tmp_path):
    m = np.random.default_rng(0).standard_normal((76, 123))
    path = tmp_path / "x.lldc"
    write_cache(path, m)
    data = path.read_bytes()
    assert data[:4] == b"LLDC"
    assert np.frombuffer(data[4:16], "<u4").tolist() == [1, 76, 123]
    assert len(data) == 16 + 4 * 76 * 123
    np.testing.assert_array_equal(read_cache(path), m.astype(np.float32))


def test_cache_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.lldc"
    bad.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(UnsupportedFormat):
        read_cache(bad)
    path = tmp_path / "t.lldc"
    write_cache(path, np.zeros((76, 4)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(UnsupportedFormat):
        read_cache(path)
