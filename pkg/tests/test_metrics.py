import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avse import dsp
from avse.metrics import (REPORT_FIELDS, DegenerateMaskError, EvalReport, antialias_window, evaluate_corpus,
                          evaluate_item, hit_fa, read_mask, stoi, third_octave_matrix, write_mask)
from avse.kernel import DimensionError, make_rng
from avse.training import SynthSpec, synth_item


@pytest.fixture(scope="module")
def utt():
    return synth_item(SynthSpec(seed=3, utt_s=2.0), 0)


def test_stoi_identity_and_scale(utt):
    c, y = utt["clean"], utt["noisy"]
    assert stoi(c, c) >= 0.99
    assert abs(stoi(c, 3.7 * y) - stoi(c, y)) <= 1e-12
    assert abs(stoi(0.25 * c, y) - stoi(c, y)) <= 1e-12


def test_stoi_independent_noise_low(utt):
    c = utt["clean"]
    assert stoi(c, make_rng(5).standard_normal(len(c))) <= 0.3


def test_stoi_too_short():
    x = make_rng(0).standard_normal(3000)
    with pytest.raises(dsp.SignalTooShortError):
        stoi(x, x)


def test_stoi_matches_reference_implementation(utt):
    pystoi = pytest.importorskip("pystoi")
    for i in range(3):
        it = synth_item(SynthSpec(seed=11, utt_s=1.5, noise="babble"), i)
        ref = pystoi.stoi(it["clean"], it["noisy"], 16000)
        assert abs(stoi(it["clean"], it["noisy"]) - ref) <= 1e-10


def test_third_octave_bands():
    obm = third_octave_matrix()
    assert obm.shape == (15, 257)
    assert np.all(obm.sum(axis=0) <= 1)
    centres = 150 * 2.0 ** (np.arange(15) / 3)
    f = np.linspace(0, 10000, 513)[:257]
    for band, fc in zip(obm, centres):
        assert f[band > 0].min() <= fc <= f[band > 0].max()


def test_antialias_window_unit_gain():
    h = antialias_window(5, 8)
    assert abs(h.sum() - 1.0) < 1e-12 and len(h) % 2 == 1
    assert np.allclose(h, h[::-1])


# -- HIT / FA -----------------------------------------------------------------------

def brute_force(est, ref):
    hits = fa = agree = ones = zeros = 0
    for e, r in zip(est.ravel().tolist(), ref.ravel().tolist()):
        ones += r == 1
        zeros += r == 0
        hits += e == 1 and r == 1
        fa += e == 1 and r == 0
        agree += e == r
    return hits / ones, fa / zeros, agree / est.size


def test_hit_fa_identities():
    ref = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.uint8)
    s = hit_fa(ref, ref)
    assert (s.hit, s.fa, s.hit_minus_fa, s.accuracy) == (1.0, 0.0, 1.0, 1.0)
    s = hit_fa(np.ones_like(ref), ref)
    assert (s.hit, s.fa, s.hit_minus_fa) == (1.0, 1.0, 0.0)
    s = hit_fa(1 - ref, ref)
    assert (s.hit, s.fa, s.hit_minus_fa, s.accuracy) == (0.0, 1.0, -1.0, 0.0)


def test_hit_fa_degenerate():
    with pytest.raises(DegenerateMaskError, match="HIT"):
        hit_fa(np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(DegenerateMaskError, match="FA"):
        hit_fa(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(DimensionError):
        hit_fa(np.ones((2, 2)), np.ones((2, 3)))


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_hit_fa_brute_force_16x16(seed, density):
    r = make_rng(seed)
    ref = (r.random((16, 16)) < density).astype(np.uint8)
    est = (r.random((16, 16)) < 0.5).astype(np.uint8)
    if ref.all() or not ref.any():
        return
    s = hit_fa(est, ref)
    assert (s.hit, s.fa, s.accuracy) == brute_force(est, ref)
    assert s.hit_minus_fa == s.hit - s.fa
    assert 0 <= s.hit <= 1 and 0 <= s.fa <= 1 and -1 <= s.hit_minus_fa <= 1
    ss = hit_fa(ref, ref)
    assert (ss.hit, ss.fa, ss.hit_minus_fa) == (1.0, 0.0, 1.0)


def test_mask_file_round_trip(tmp_path):
    m = (make_rng(0).random((7, 257)) > 0.5).astype(np.uint8)
    write_mask(tmp_path / "m.msk", m)
    assert np.array_equal(read_mask(tmp_path / "m.msk"), m)
    with pytest.raises(ValueError):
        write_mask(tmp_path / "bad.msk", m * 2)
    (tmp_path / "t.msk").write_bytes((tmp_path / "m.msk").read_bytes()[:-3])
    with pytest.raises(ValueError):
        read_mask(tmp_path / "t.msk")


# -- reports --------------------------------------------------------------------------

def _item(utt, seed, cond="white"):
    it = synth_item(SynthSpec(seed=seed, utt_s=1.0), 0)
    return {"utt": utt, "cond": cond, "snr_db": it["snr_db"], "clean": it["clean"], "noisy": it["noisy"],
            "enhanced": 0.5 * (it["clean"] + it["noisy"])}


def test_identical_pair_at_cap(utt):
    row = evaluate_item({"utt": "u", "cond": "c", "snr_db": 0.0, "clean": utt["clean"], "noisy": utt["clean"],
                         "enhanced": utt["clean"]})
    assert row["si_sdr_enh"] == dsp.SDR_CAP_DB and row["stoi_enh"] >= 0.99
    assert np.isnan(row["hit"]) and np.isnan(row["pesq"])


def test_aggregate_is_hand_mean():
    rep = evaluate_corpus([_item("a", 1), _item("b", 2, "babble"), _item("c", 3)])
    agg = {r["cond"]: r for r in rep.aggregate()}
    rows = rep.rows
    assert agg["all"]["si_sdr_enh"] == np.mean([r["si_sdr_enh"] for r in rows])
    assert agg["white"]["stoi_noisy"] == np.mean([rows[0]["stoi_noisy"], rows[2]["stoi_noisy"]])
    d = rep.deltas()
    assert d["si_sdr"] == agg["all"]["si_sdr_enh"] - agg["all"]["si_sdr_noisy"]
    assert d["si_sdr"] > 0


def test_report_csv_format_and_order():
    rep = evaluate_corpus([_item("b", 1), _item("a", 2)])
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_FIELDS)
    assert [l.split(",")[0] for l in lines[1:]] == ["b", "a", "MEAN", "MEAN"]
    val = lines[1].split(",")[3]
    assert len(val.replace("-", "").replace(".", "").lstrip("0")) <= 6


def test_per_item_failures_recorded():
    bad = _item("bad", 1)
    bad["enhanced"] = bad["enhanced"][:-5]
    rep = evaluate_corpus([_item("ok", 2), bad, {"utt": "missing", "error": "file not found"}])
    assert [r["utt"] for r in rep.rows] == ["ok"]
    assert [u for u, _ in rep.errors] == ["bad", "missing"]


def test_pesq_hook(tmp_path):
    import sys

    script = tmp_path / "fake_pesq.py"
    script.write_text("import sys\nprint('score', 2.5)\n")
    row = evaluate_item(_item("p", 1), pesq_cmd=f"{sys.executable} {script} {{ref}} {{deg}}")
    assert row["pesq"] == 2.5


def test_empty_report():
    rep = EvalReport()
    assert rep.aggregate() == [] and rep.deltas() == {}
