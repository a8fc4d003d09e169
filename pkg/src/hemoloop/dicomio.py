"""Reading and writing the constrained CT slice file format, plus volume assembly.

The on-disk format is a deliberately small DICOM subset: a 128-byte zero
preamble, the "DICM" magic, then explicit-VR little-endian data elements in
ascending tag order. Exactly one image per file, uncompressed, signed 16-bit
pixels. Anything outside that subset is rejected rather than guessed at.

Mandatory tags (all files we write carry exactly these, in this order):

    (0008,0018) SOPInstanceUID     UI
    (0020,000D) StudyInstanceUID   UI
    (0020,000E) SeriesInstanceUID  UI
    (0020,0032) ImagePosition      DS  (x\\y\\z mm)
    (0020,1041) SliceLocation      DS  (mm)
    (0028,0010) Rows               US
    (0028,0011) Columns            US
    (0028,0030) PixelSpacing       DS  (row_mm\\col_mm)
    (0028,0101) BitsStored         US  (always 16)
    (0028,1052) RescaleIntercept   DS
    (0028,1053) RescaleSlope       DS
    (7FE0,0010) PixelData          OW  (row-major little-endian int16)
"""

from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from .errors import (
    EmptyInput,
    MissingMagic,
    MissingTag,
    MixedSeries,
    NonUniformSpacing,
    PixelCountMismatch,
    ShapeMismatch,
    UnsupportedTransferSyntax,
)

MAGIC = b"DICM"
PREAMBLE = b"\x00" * 128

TAG_SOP_UID = (0x0008, 0x0018)
TAG_STUDY_UID = (0x0020, 0x000D)
TAG_SERIES_UID = (0x0020, 0x000E)
TAG_IMAGE_POSITION = (0x0020, 0x0032)
TAG_SLICE_LOCATION = (0x0020, 0x1041)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLS = (0x0028, 0x0011)
TAG_PIXEL_SPACING = (0x0028, 0x0030)
TAG_BITS_STORED = (0x0028, 0x0101)
TAG_RESCALE_INTERCEPT = (0x0028, 0x1052)
TAG_RESCALE_SLOPE = (0x0028, 0x1053)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)
TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)

MANDATORY_TAGS = [
    (TAG_SOP_UID, "SOPInstanceUID"),
    (TAG_STUDY_UID, "StudyInstanceUID"),
    (TAG_SERIES_UID, "SeriesInstanceUID"),
    (TAG_IMAGE_POSITION, "ImagePosition"),
    (TAG_SLICE_LOCATION, "SliceLocation"),
    (TAG_ROWS, "Rows"),
    (TAG_COLS, "Columns"),
    (TAG_PIXEL_SPACING, "PixelSpacing"),
    (TAG_BITS_STORED, "BitsStored"),
    (TAG_RESCALE_INTERCEPT, "RescaleIntercept"),
    (TAG_RESCALE_SLOPE, "RescaleSlope"),
    (TAG_PIXEL_DATA, "PixelData"),
]

EXPLICIT_VR_LE_UID = "1.2.840.10008.1.2.1"

# VRs with a 16-bit length field; everything else we accept uses the
# 2-byte-reserved + 32-bit length form.
_SHORT_VRS = {"AE", "AS", "AT", "CS", "DA", "DS", "DT", "FL", "FD", "IS",
              "LO", "LT", "PN", "SH", "SL", "SS", "ST", "TM", "UI", "UL", "US"}
_LONG_VRS = {"OB", "OW", "OF", "SQ", "UN", "UT"}

_UID_RE = re.compile(r"^[0-9]+(\.[0-9]+)*$")

# Default z spacing assigned to a single-slice series (geometry is undefined
# with one slice, so a fixed 1.0 mm keeps volumes well formed).
SINGLE_SLICE_Z_MM = 1.0

# Maximum allowed deviation of any inter-slice gap from the median gap.
DEFAULT_SPACING_TOLERANCE_MM = 0.25

# Attached to every generated report series; results are research output,
# not a clinical device.
DEFAULT_DISCLAIMER = "ikke godkjent for klinisk bruk"


def _validate_uid(name: str, uid: str) -> None:
    if not uid or len(uid) > 64 or not _UID_RE.match(uid):
        raise ValueError(f"{name} must be non-empty dot-decimal, <= 64 chars: {uid!r}")


@dataclass
class SliceImage:
    """One axial CT slice with raw (pre-rescale) stored pixel values."""

    study_uid: str
    series_uid: str
    sop_uid: str
    rows: int
    cols: int
    pixel_spacing: tuple[float, float]  # (row_mm, col_mm)
    slice_location: float
    image_position: tuple[float, float, float]
    rescale_slope: float
    rescale_intercept: float
    pixel_data: np.ndarray  # int16, shape (rows, cols)
    bits_stored: int = 16

    def __post_init__(self):
        _validate_uid("study_uid", self.study_uid)
        _validate_uid("series_uid", self.series_uid)
        _validate_uid("sop_uid", self.sop_uid)
        if self.bits_stored != 16:
            raise ValueError("bits_stored must be 16")
        if self.pixel_spacing[0] <= 0 or self.pixel_spacing[1] <= 0:
            raise ValueError("pixel_spacing components must be > 0")
        self.pixel_data = np.asarray(self.pixel_data, dtype=np.int16)
        if self.pixel_data.shape != (self.rows, self.cols):
            raise ValueError(
                f"pixel_data shape {self.pixel_data.shape} != (rows, cols) "
                f"({self.rows}, {self.cols})"
            )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SliceImage):
            return NotImplemented
        return (
            self.study_uid == other.study_uid
            and self.series_uid == other.series_uid
            and self.sop_uid == other.sop_uid
            and self.rows == other.rows
            and self.cols == other.cols
            and self.pixel_spacing == other.pixel_spacing
            and self.slice_location == other.slice_location
            and self.image_position == other.image_position
            and self.rescale_slope == other.rescale_slope
            and self.rescale_intercept == other.rescale_intercept
            and self.bits_stored == other.bits_stored
            and np.array_equal(self.pixel_data, other.pixel_data)
        )


@dataclass
class VolumeImage:
    """A 3D HU scalar grid (rescale already applied), axis order (x, y, z)."""

    study_uid: str
    series_uid: str
    voxels: np.ndarray  # float, shape (nx, ny, nz)
    spacing: tuple[float, float, float]  # (sx, sy, sz) mm
    origin: tuple[float, float, float]

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or self.voxels.shape[2] < 1:
            raise ValueError("voxels must be 3-dimensional with nz >= 1")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be > 0 in all axes")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxels must be finite")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def __eq__(self, other) -> bool:
        if not isinstance(other, VolumeImage):
            return NotImplemented
        return (
            self.study_uid == other.study_uid
            and self.series_uid == other.series_uid
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass
class ReportSeries:
    """Derived series carrying an AI result back to the image store.

    kind is "positive_mask_overlay" (mask + volume present) or
    "negative_marker" (neither present, rendered as an all-clear marker).
    """

    kind: str
    derived_from: str  # series_uid
    disclaimer_text: str = DEFAULT_DISCLAIMER
    overlay_mask: np.ndarray | None = None  # bool, volume-shaped
    lesion_volume_ml: float | None = None

    def __post_init__(self):
        if self.kind not in ("positive_mask_overlay", "negative_marker"):
            raise ValueError(f"unknown report kind {self.kind!r}")
        if not self.disclaimer_text:
            raise ValueError("disclaimer_text must be non-empty")
        if self.kind == "negative_marker":
            if self.overlay_mask is not None or self.lesion_volume_ml is not None:
                raise ValueError("negative_marker carries no mask or volume")
        else:
            if self.overlay_mask is None or self.lesion_volume_ml is None:
                raise ValueError("positive_mask_overlay requires mask and volume")


# --- element-level encoding -------------------------------------------------

def _encode_element(group: int, elem: int, vr: str, value: bytes) -> bytes:
    if len(value) % 2:
        raise ValueError("element values must have even length")
    head = struct.pack("<HH", group, elem) + vr.encode("ascii")
    if vr in _SHORT_VRS:
        if len(value) > 0xFFFF:
            raise ValueError("value too long for short VR form")
        return head + struct.pack("<H", len(value)) + value
    return head + b"\x00\x00" + struct.pack("<I", len(value)) + value


def _pad(raw: bytes, pad_byte: bytes) -> bytes:
    return raw + pad_byte if len(raw) % 2 else raw


def _ds(*values: float) -> bytes:
    # repr() round-trips doubles exactly, which the round-trip law needs.
    return _pad("\\".join(repr(float(v)) for v in values).encode("ascii"), b" ")


def _ui(uid: str) -> bytes:
    return _pad(uid.encode("ascii"), b"\x00")


def _us(value: int) -> bytes:
    return struct.pack("<H", value)


def write_slice(s: SliceImage) -> bytes:
    """Serialize a slice; write_slice is deterministic and parse-invertible."""
    pixels = s.pixel_data.astype("<i2").tobytes()
    buf = io.BytesIO()
    buf.write(PREAMBLE)
    buf.write(MAGIC)
    buf.write(_encode_element(*TAG_SOP_UID, "UI", _ui(s.sop_uid)))
    buf.write(_encode_element(*TAG_STUDY_UID, "UI", _ui(s.study_uid)))
    buf.write(_encode_element(*TAG_SERIES_UID, "UI", _ui(s.series_uid)))
    buf.write(_encode_element(*TAG_IMAGE_POSITION, "DS", _ds(*s.image_position)))
    buf.write(_encode_element(*TAG_SLICE_LOCATION, "DS", _ds(s.slice_location)))
    buf.write(_encode_element(*TAG_ROWS, "US", _us(s.rows)))
    buf.write(_encode_element(*TAG_COLS, "US", _us(s.cols)))
    buf.write(_encode_element(*TAG_PIXEL_SPACING, "DS", _ds(*s.pixel_spacing)))
    buf.write(_encode_element(*TAG_BITS_STORED, "US", _us(s.bits_stored)))
    buf.write(_encode_element(*TAG_RESCALE_INTERCEPT, "DS", _ds(s.rescale_intercept)))
    buf.write(_encode_element(*TAG_RESCALE_SLOPE, "DS", _ds(s.rescale_slope)))
    buf.write(_encode_element(*TAG_PIXEL_DATA, "OW", pixels))
    return buf.getvalue()


def _read_elements(data: bytes) -> dict[tuple[int, int], tuple[str, bytes]]:
    """Scan explicit-VR-LE elements into a tag -> (vr, value) map.

    Stops silently at a truncated trailing element; the mandatory-tag check
    downstream turns that into the right MissingTag error.
    """
    elements: dict[tuple[int, int], tuple[str, bytes]] = {}
    pos = 0
    n = len(data)
    while pos + 8 <= n:
        group, elem = struct.unpack_from("<HH", data, pos)
        vr_bytes = data[pos + 4:pos + 6]
        try:
            vr = vr_bytes.decode("ascii")
        except UnicodeDecodeError:
            raise UnsupportedTransferSyntax(
                f"non-ASCII VR bytes {vr_bytes!r}; only explicit VR little-endian is supported"
            )
        if not (vr.isalpha() and vr.isupper()):
            raise UnsupportedTransferSyntax(
                f"unrecognized VR {vr!r}; only explicit VR little-endian is supported"
            )
        if vr in _SHORT_VRS:
            (length,) = struct.unpack_from("<H", data, pos + 6)
            value_start = pos + 8
        elif vr in _LONG_VRS:
            if pos + 12 > n:
                break
            (length,) = struct.unpack_from("<I", data, pos + 8)
            value_start = pos + 12
        else:
            raise UnsupportedTransferSyntax(f"unsupported VR {vr!r}")
        value = data[value_start:value_start + length]
        elements[(group, elem)] = (vr, value)
        if len(value) < length:
            # Truncated value: only tolerable for pixel data, where the
            # count check reports it.
            if (group, elem) != TAG_PIXEL_DATA:
                del elements[(group, elem)]
            break
        pos = value_start + length
    return elements


def _parse_ds(raw: bytes) -> list[float]:
    text = raw.decode("ascii").strip(" \x00")
    return [float(part) for part in text.split("\\")]


def _parse_ui(raw: bytes) -> str:
    return raw.decode("ascii").rstrip("\x00").strip()


def _require(elements: dict, tag: tuple[int, int], name: str) -> tuple[str, bytes]:
    if tag not in elements:
        raise MissingTag(tag, name)
    return elements[tag]


def parse_slice(data: bytes) -> SliceImage:
    """Decode one slice file. Pixel values stay raw; rescale happens at assembly."""
    if len(data) < 132 or data[128:132] != MAGIC:
        raise MissingMagic("input lacks the 128-byte preamble + DICM magic")
    elements = _read_elements(data[132:])

    if TAG_TRANSFER_SYNTAX in elements:
        ts = _parse_ui(elements[TAG_TRANSFER_SYNTAX][1])
        if ts != EXPLICIT_VR_LE_UID:
            raise UnsupportedTransferSyntax(f"transfer syntax {ts!r} not supported")

    for tag, name in MANDATORY_TAGS:
        _require(elements, tag, name)

    rows = struct.unpack("<H", elements[TAG_ROWS][1])[0]
    cols = struct.unpack("<H", elements[TAG_COLS][1])[0]
    bits = struct.unpack("<H", elements[TAG_BITS_STORED][1])[0]
    pixel_raw = elements[TAG_PIXEL_DATA][1]
    if len(pixel_raw) != rows * cols * 2:
        raise PixelCountMismatch(
            f"pixel data holds {len(pixel_raw)} bytes, expected {rows * cols * 2}"
        )
    pixels = np.frombuffer(pixel_raw, dtype="<i2").reshape(rows, cols)

    position = _parse_ds(elements[TAG_IMAGE_POSITION][1])
    spacing = _parse_ds(elements[TAG_PIXEL_SPACING][1])
    if len(position) != 3 or len(spacing) != 2:
        raise PixelCountMismatch("ImagePosition needs 3 values, PixelSpacing 2")

    return SliceImage(
        study_uid=_parse_ui(elements[TAG_STUDY_UID][1]),
        series_uid=_parse_ui(elements[TAG_SERIES_UID][1]),
        sop_uid=_parse_ui(elements[TAG_SOP_UID][1]),
        rows=rows,
        cols=cols,
        pixel_spacing=(spacing[0], spacing[1]),
        slice_location=_parse_ds(elements[TAG_SLICE_LOCATION][1])[0],
        image_position=(position[0], position[1], position[2]),
        rescale_slope=_parse_ds(elements[TAG_RESCALE_SLOPE][1])[0],
        rescale_intercept=_parse_ds(elements[TAG_RESCALE_INTERCEPT][1])[0],
        pixel_data=pixels.copy(),
        bits_stored=bits,
    )


# --- volume assembly ---------------------------------------------------------

def assemble_volume(
    slices: list[SliceImage],
    spacing_tolerance_mm: float = DEFAULT_SPACING_TOLERANCE_MM,
) -> VolumeImage:
    """Stack slices into an HU volume, sorted by image-position z.

    Duplicate SOP instances are collapsed last-write-wins (re-pushed studies
    arrive as byte-identical duplicates). Inter-slice gaps must agree with the
    median gap within spacing_tolerance_mm.
    """
    if not slices:
        raise EmptyInput("no slices to assemble")

    by_sop: dict[str, SliceImage] = {}
    for s in slices:
        by_sop[s.sop_uid] = s
    unique = list(by_sop.values())

    first = unique[0]
    for s in unique[1:]:
        if (
            s.study_uid != first.study_uid
            or s.series_uid != first.series_uid
            or s.rows != first.rows
            or s.cols != first.cols
            or s.pixel_spacing != first.pixel_spacing
        ):
            raise MixedSeries(
                f"slice {s.sop_uid} does not match series geometry of {first.sop_uid}"
            )

    unique.sort(key=lambda s: s.image_position[2])
    zs = [s.image_position[2] for s in unique]

    if len(unique) == 1:
        z_spacing = SINGLE_SLICE_Z_MM
    else:
        gaps = [b - a for a, b in zip(zs, zs[1:])]
        med = median(gaps)
        for gap in gaps:
            if abs(gap - med) > spacing_tolerance_mm:
                raise NonUniformSpacing(
                    f"gap {gap} mm deviates from median {med} mm by more than "
                    f"{spacing_tolerance_mm} mm"
                )
        if med <= 0:
            raise NonUniformSpacing(f"non-positive median slice gap {med} mm")
        z_spacing = float(med)

    nz = len(unique)
    nx, ny = first.cols, first.rows
    voxels = np.empty((nx, ny, nz), dtype=np.float64)
    for k, s in enumerate(unique):
        hu = s.rescale_slope * s.pixel_data.astype(np.float64) + s.rescale_intercept
        voxels[:, :, k] = hu.T  # raster is (row, col) = (y, x)

    row_mm, col_mm = first.pixel_spacing
    x0, y0, _ = first.image_position
    return VolumeImage(
        study_uid=first.study_uid,
        series_uid=first.series_uid,
        voxels=voxels,
        spacing=(float(col_mm), float(row_mm), z_spacing),
        origin=(float(x0), float(y0), float(zs[0])),
    )


def render_report(
    mask: np.ndarray | None,
    source: VolumeImage,
    disclaimer_text: str = DEFAULT_DISCLAIMER,
) -> ReportSeries:
    """Build the push-back series for an inference result.

    A non-empty binarized mask yields a positive overlay annotated with the
    total lesion volume in mL; an empty or absent mask yields the all-clear
    negative marker.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != source.voxels.shape:
            raise ShapeMismatch(
                f"mask shape {mask.shape} != volume shape {source.voxels.shape}"
            )
    if mask is None or not mask.any():
        return ReportSeries(
            kind="negative_marker",
            derived_from=source.series_uid,
            disclaimer_text=disclaimer_text,
        )
    volume_ml = lesion_volume_ml(int(mask.sum()), source.spacing)
    return ReportSeries(
        kind="positive_mask_overlay",
        derived_from=source.series_uid,
        disclaimer_text=disclaimer_text,
        overlay_mask=mask,
        lesion_volume_ml=volume_ml,
    )


def lesion_volume_ml(voxel_count: int, spacing: tuple[float, float, float]) -> float:
    sx, sy, sz = spacing
    return voxel_count * (sx * sy * sz) / 1000.0
