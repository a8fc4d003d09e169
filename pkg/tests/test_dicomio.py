import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hemoloop import dicomio
from hemoloop.errors import (
    EmptyInput,
    MissingMagic,
    MissingTag,
    MixedSeries,
    NonUniformSpacing,
    PixelCountMismatch,
    ShapeMismatch,
    UnsupportedTransferSyntax,
)

from conftest import make_slice, make_volume


class TestParseWrite:
    def test_round_trip_identity(self):
        s = make_slice(pixels=[[0, 1], [2, 3]])
        assert dicomio.parse_slice(dicomio.write_slice(s)) == s

    def test_writes_are_deterministic(self):
        s = make_slice()
        assert dicomio.write_slice(s) == dicomio.write_slice(s)

    def test_missing_magic(self):
        with pytest.raises(MissingMagic):
            dicomio.parse_slice(b"\x00" * 200)

    def test_truncation_before_pixel_data_is_missing_tag(self):
        blob = dicomio.write_slice(make_slice())
        # cut inside the pixel-data element header
        truncated = blob[: blob.rindex(b"OW") - 4]
        with pytest.raises(MissingTag) as err:
            dicomio.parse_slice(truncated)
        assert err.value.tag == dicomio.TAG_PIXEL_DATA

    def test_each_mandatory_tag_reported_when_absent(self):
        # remove one element at a time by re-encoding without it
        s = make_slice()
        blob = dicomio.write_slice(s)
        # drop the rows element (0028,0010): locate its 8-byte header
        import struct
        needle = struct.pack("<HH", 0x0028, 0x0010) + b"US"
        at = blob.index(needle)
        hacked = blob[:at] + blob[at + 10:]
        with pytest.raises(MissingTag) as err:
            dicomio.parse_slice(hacked)
        assert err.value.tag == dicomio.TAG_ROWS

    def test_pixel_count_mismatch(self):
        s = make_slice()
        blob = dicomio.write_slice(s)
        with pytest.raises(PixelCountMismatch):
            dicomio.parse_slice(blob[:-2])

    def test_unsupported_transfer_syntax_element(self):
        s = make_slice()
        blob = dicomio.write_slice(s)
        ts = dicomio._encode_element(0x0002, 0x0010, "UI",
                                     dicomio._ui("1.2.840.10008.1.2"))
        hacked = blob[:132] + ts + blob[132:]
        with pytest.raises(UnsupportedTransferSyntax):
            dicomio.parse_slice(hacked)

    def test_implicit_vr_rejected(self):
        s = make_slice()
        blob = bytearray(dicomio.write_slice(s))
        blob[136:138] = b"\x10\x00"  # stomp the first VR with binary junk
        with pytest.raises(UnsupportedTransferSyntax):
            dicomio.parse_slice(bytes(blob))

    def test_rescale_oracle_typical_ct(self):
        # stored 1024 with slope 1, intercept -1024 must land on 0 HU
        pixels = np.full((2, 2), 1024, dtype=np.int16)
        s = make_slice(pixels=pixels)
        parsed = dicomio.parse_slice(dicomio.write_slice(s))
        hu = parsed.rescale_slope * parsed.pixel_data.astype(float) + parsed.rescale_intercept
        assert np.all(hu == 0.0)

    def test_single_flipped_pixel_byte_changes_one_element(self):
        # offset bookkeeping oracle: walk the layout to the pixel payload
        import struct
        s = make_slice(rows=3, cols=3, pixels=np.zeros((3, 3), dtype=np.int16))
        blob = bytearray(dicomio.write_slice(s))
        offset = 132
        while True:
            group, elem = struct.unpack_from("<HH", blob, offset)
            vr = blob[offset + 4:offset + 6].decode()
            if vr in ("OW", "OB"):
                (length,) = struct.unpack_from("<I", blob, offset + 8)
                payload_at = offset + 12
            else:
                (length,) = struct.unpack_from("<H", blob, offset + 6)
                payload_at = offset + 8
            if (group, elem) == dicomio.TAG_PIXEL_DATA:
                break
            offset = payload_at + length
        blob[payload_at + 4] ^= 0xFF  # third pixel, low byte
        parsed = dicomio.parse_slice(bytes(blob))
        diff = parsed.pixel_data != s.pixel_data
        assert diff.sum() == 1
        assert diff.flat[2]

    @settings(max_examples=60, deadline=None)
    @given(
        rows=st.integers(1, 8),
        cols=st.integers(1, 8),
        slope=st.sampled_from([1.0, 0.5, 2.0]),
        intercept=st.floats(-2048, 2048, allow_nan=False).map(lambda v: round(v, 3)),
        z=st.floats(-500, 500, allow_nan=False).map(lambda v: round(v, 4)),
        seed=st.integers(0, 2**31),
    )
    def test_round_trip_property(self, rows, cols, slope, intercept, z, seed):
        rng = np.random.default_rng(seed)
        pixels = rng.integers(-32768, 32767, size=(rows, cols), dtype=np.int16)
        s = make_slice(rows=rows, cols=cols, slope=slope, intercept=intercept,
                       slice_location=z, image_position=(1.25, -4.5, z),
                       pixels=pixels)
        assert dicomio.parse_slice(dicomio.write_slice(s)) == s


class TestAssembly:
    def _slices_at(self, zs, **kwargs):
        return [
            make_slice(sop=f"1.2.3.4.{i}", slice_location=z,
                       image_position=(0.0, 0.0, z), **kwargs)
            for i, z in enumerate(zs)
        ]

    def test_uniform_gaps(self):
        vol = dicomio.assemble_volume(self._slices_at([0.0, 5.0, 10.0]))
        assert vol.shape == (2, 2, 3)
        assert vol.spacing[2] == 5.0

    def test_gap_tolerance_boundary(self):
        # gaps {5, 6}: median 5.5, both deviate by 0.5
        slices = self._slices_at([0.0, 5.0, 11.0])
        vol = dicomio.assemble_volume(slices, spacing_tolerance_mm=0.5)
        assert vol.spacing[2] == 5.5
        with pytest.raises(NonUniformSpacing):
            dicomio.assemble_volume(slices, spacing_tolerance_mm=0.4)

    def test_single_slice_gets_default_z_spacing(self):
        vol = dicomio.assemble_volume(self._slices_at([3.0]))
        assert vol.shape[2] == 1
        assert vol.spacing[2] == dicomio.SINGLE_SLICE_Z_MM

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            dicomio.assemble_volume([])

    def test_mixed_series_rejected(self):
        slices = self._slices_at([0.0, 5.0])
        slices[1].series_uid = "7.7.7"
        with pytest.raises(MixedSeries):
            dicomio.assemble_volume(slices)

    def test_rescale_applied(self):
        slices = self._slices_at([0.0, 5.0], slope=2.0, intercept=-100.0)
        vol = dicomio.assemble_volume(slices)
        expected = 2.0 * slices[0].pixel_data.astype(float).T - 100.0
        assert np.array_equal(vol.voxels[:, :, 0], expected)

    def test_permutation_invariance(self, rng):
        zs = [0.0, 2.0, 4.0, 6.0]
        slices = [
            make_slice(sop=f"1.2.3.4.{i}", slice_location=z,
                       image_position=(0.0, 0.0, z),
                       pixels=rng.integers(-100, 100, size=(2, 2), dtype=np.int16))
            for i, z in enumerate(zs)
        ]
        reference = dicomio.assemble_volume(list(slices))
        for _ in range(5):
            shuffled = list(slices)
            rng.shuffle(shuffled)
            assert dicomio.assemble_volume(shuffled) == reference

    def test_duplicate_sop_last_write_wins(self):
        a = make_slice(sop="1.1", pixels=np.zeros((2, 2), dtype=np.int16))
        b = make_slice(sop="1.1", pixels=np.ones((2, 2), dtype=np.int16))
        other = make_slice(sop="1.2", slice_location=5.0,
                           image_position=(0.0, 0.0, 5.0))
        vol = dicomio.assemble_volume([a, b, other])
        assert vol.shape[2] == 2
        # slice b's stored value 1 -> HU = 1*1 + (-1024)
        assert np.all(vol.voxels[:, :, 0] == -1023.0)


class TestReportSeries:
    def test_negative_marker_for_empty_mask(self):
        vol = make_volume(np.zeros((2, 2, 2)))
        report = dicomio.render_report(np.zeros((2, 2, 2), dtype=bool), vol)
        assert report.kind == "negative_marker"
        assert report.overlay_mask is None
        assert report.lesion_volume_ml is None

    def test_positive_volume_arithmetic(self):
        vox = np.zeros((10, 10, 10))
        mask = np.zeros((10, 10, 10), dtype=bool)
        mask.flat[:1000] = True
        vol = make_volume(vox, spacing=(0.5, 0.5, 1.0))
        report = dicomio.render_report(mask, vol)
        assert report.kind == "positive_mask_overlay"
        assert report.lesion_volume_ml == pytest.approx(0.25)

    def test_default_disclaimer(self):
        vol = make_volume(np.zeros((2, 2, 2)))
        report = dicomio.render_report(None, vol)
        assert report.disclaimer_text == "ikke godkjent for klinisk bruk"

    def test_shape_mismatch(self):
        vol = make_volume(np.zeros((2, 2, 2)))
        with pytest.raises(ShapeMismatch):
            dicomio.render_report(np.zeros((3, 2, 2), dtype=bool), vol)
