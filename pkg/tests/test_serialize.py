import numpy as np
import pytest

from conftest import make_identity_data, make_logit_data
from qifcombine.combine import build_cohort_summary
from qifcombine.errors import PayloadError
from qifcombine.serialize import (
    decode_scores,
    decode_summary,
    encode_scores,
    encode_summary,
    read_summary,
    summary_from_json,
    summary_to_json,
    write_summary,
)
from qifcombine.source import fit_source


def make_summary(rng, n=60, link="identity"):
    fits = {}
    for j in (1, 2):
        if link == "identity":
            d, _ = make_identity_data(rng, n=n, m=3 + j)
        else:
            d, _ = make_logit_data(rng, n=n, m=3 + j)
        fits[j] = fit_source(d)
    return build_cohort_summary(7, fits)


class TestBinaryRoundTrip:
    @pytest.mark.parametrize("link", ["identity", "logit"])
    def test_bit_exact(self, rng, link):
        cs = make_summary(rng, link=link)
        back = decode_summary(encode_summary(cs))
        assert back == cs
        # double round trip produces identical bytes
        assert encode_summary(back) == encode_summary(cs)

    def test_file_round_trip(self, rng, tmp_path):
        cs = make_summary(rng)
        path = tmp_path / "s.qifs"
        write_summary(path, cs, mode="binary")
        assert read_summary(path) == cs

    def test_json_mode(self, rng, tmp_path):
        cs = make_summary(rng, link="logit")
        back = summary_from_json(summary_to_json(cs))
        assert back == cs
        path = tmp_path / "s.json"
        write_summary(path, cs, mode="json")
        assert read_summary(path) == cs

    def test_payload_size_independent_of_n(self):
        r1, r2 = np.random.default_rng(1), np.random.default_rng(2)
        small = make_summary(r1, n=60)
        big = make_summary(r2, n=1400)
        assert len(encode_summary(small)) == len(encode_summary(big))

    def test_no_row_level_fields(self, rng):
        # Archives are consumed into V at summary construction and the
        # payload never carries per-participant vectors.
        cs = make_summary(rng)
        for f in cs.fits.values():
            assert f.psi_at_fit is None
        blob = encode_summary(cs)
        d = cs.V.shape[0]
        p = 3
        # exact byte budget: frame + scalars + per-block records + V triangle
        per_block = sum(
            struct_size_block(p, f.S_hat.shape[0] // p) for f in cs.fits.values()
        )
        expected = 21 + 20 + per_block + 4 + 8 * (d * (d + 1) // 2)
        assert len(blob) == expected


def struct_size_block(p, s):
    # j u32 + 5 u8 + iterations u32 + q f64 + dispersion f64 + theta + S
    return 4 + 5 + 4 + 8 + 8 + 8 * p + 8 * p * s * p


class TestCorruption:
    def test_checksum_detected(self, rng):
        blob = bytearray(encode_summary(make_summary(rng)))
        blob[40] ^= 0xFF
        with pytest.raises(PayloadError, match="checksum"):
            decode_summary(bytes(blob))

    def test_version_mismatch(self, rng):
        blob = bytearray(encode_summary(make_summary(rng)))
        blob[4] = 99
        with pytest.raises(PayloadError, match="version"):
            decode_summary(bytes(blob))

    def test_truncation(self, rng):
        blob = encode_summary(make_summary(rng))
        with pytest.raises(PayloadError):
            decode_summary(blob[: len(blob) // 2])

    def test_wrong_magic(self):
        with pytest.raises(PayloadError):
            decode_summary(b"NOPE" + b"\0" * 64)

    def test_round_confusion(self, rng):
        scores = encode_scores(1, 50, {(1, 1): np.arange(4.0)})
        with pytest.raises(PayloadError, match="round"):
            decode_summary(scores)


class TestScores:
    def test_round_trip(self):
        scores = {(1, 2): np.array([0.1, -0.2, 0.3]), (2, 2): np.array([1.5, 2.5])}
        cid, n, back = decode_scores(encode_scores(2, 300, scores))
        assert cid == 2 and n == 300
        assert set(back) == set(scores)
        for key in scores:
            assert np.array_equal(back[key], scores[key])
