"""Model-spec text files and weight containers.

The spec file is a line-oriented key/value format describing what to
build: either a named variant or an explicit stage table, plus the class
count and branch configuration. Parsing reports the line and column of
anything it rejects, and parse -> serialize -> parse is the identity on
the parsed value.

The weight container is a flat binary tensor table:

    magic "FMVW" | version u32 | form u8 | count u32
    per entry: name_len u16 | name utf-8 | dtype u8 | rank u8
               | dims u32 x rank | payload f32 x prod(dims)
    trailing CRC32 (u32) over everything after the 9-byte header

All integers and floats are little-endian. dtype 0 is float32, the only
kind a model carries. Entry names are the model's state paths.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import SpecError, SpecParseError, WeightFormatError
from .model import Model, StageSpec, VariantSpec, build_model, variant_names

MAGIC = b"FMVW"
VERSION = 1
_FORM_TAGS = {"training": 0, "deployed": 1}
_FORM_NAMES = {v: k for k, v in _FORM_TAGS.items()}
_SCALE_MODES = ("paper_literal", "scaled_by_sqrt_d")


# ---------------------------------------------------------------------------
# model spec text format


@dataclass(frozen=True)
class ModelSpecFile:
    schema_version: int
    classes: int
    variant: str | None = None
    table: VariantSpec | None = None        # explicit stem + stage rows
    extras_n: int = 2
    extra_groups: tuple | None = None
    scale_mode: str = "paper_literal"
    mid_dw: bool = True

    def __post_init__(self):
        if (self.variant is None) == (self.table is None):
            raise SpecParseError("spec needs a variant or an explicit stage table, not both")

    def build(self, seed: int = 0, **overrides) -> Model:
        kwargs = dict(classes=self.classes, seed=seed, extras_n=self.extras_n,
                      mid_dw=self.mid_dw, scale_mode=self.scale_mode,
                      extra_groups=self.extra_groups)
        kwargs.update(overrides)
        return build_model(self.variant if self.variant else self.table, **kwargs)


def _fail(msg, line_no, line, token):
    col = line.find(token) + 1 if token and token in line else 1
    raise SpecParseError(msg, line_no, col)


def _parse_stage(parts, line_no, line) -> dict:
    if not parts or parts[0] not in ("cfb", "fmb"):
        _fail("stage kind must be cfb or fmb", line_no, line, parts[0] if parts else "")
    out = {"kind": parts[0], "fm": 0, "blocks": 1}
    seen = set()
    for tok in parts[1:]:
        key, eq, val = tok.partition("=")
        if not eq or key not in ("channels", "fm", "blocks"):
            _fail(f"unknown stage field {tok!r}", line_no, line, tok)
        if key in seen:
            _fail(f"duplicate stage field {key!r}", line_no, line, tok)
        seen.add(key)
        try:
            if key == "channels":
                trip = tuple(int(v) for v in val.split(","))
                if len(trip) != 3:
                    raise ValueError
                out["channels"] = trip
            else:
                out[key] = int(val)
        except ValueError:
            _fail(f"bad value for {key!r}: {val!r}", line_no, line, tok)
    if "channels" not in out:
        _fail("stage needs channels=a,b,c", line_no, line, parts[0])
    return out


def parse_model_spec(text: str) -> ModelSpecFile:
    fields: dict = {}
    stem = None
    stage_rows: list[dict] = []
    seen_keys: set[str] = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        parts = line.split()
        key, args = parts[0], parts[1:]

        if key in ("schema_version", "classes", "extras_n", "variant",
                   "scale_mode", "mid_dw", "extra_groups", "stem"):
            if key in seen_keys:
                _fail(f"duplicate field {key!r}", line_no, line, key)
            seen_keys.add(key)

        if key == "schema_version":
            if args != ["1"]:
                _fail(f"unsupported schema version {' '.join(args)!r}", line_no, line,
                      args[0] if args else key)
            fields["schema_version"] = 1
        elif key == "variant":
            if len(args) != 1 or args[0] not in variant_names():
                _fail(f"unknown variant {' '.join(args)!r}", line_no, line,
                      args[0] if args else key)
            fields["variant"] = args[0]
        elif key in ("classes", "extras_n"):
            try:
                val = int(args[0]) if len(args) == 1 else None
            except ValueError:
                val = None
            if val is None or val < 0 or (key == "classes" and val < 1):
                _fail(f"bad value for {key!r}", line_no, line, args[0] if args else key)
            fields[key] = val
        elif key == "extra_groups":
            try:
                groups = tuple(int(a) for a in args)
            except ValueError:
                groups = ()
            if not groups or any(g < 1 for g in groups):
                _fail("extra_groups needs positive integers", line_no, line,
                      args[0] if args else key)
            fields["extra_groups"] = groups
        elif key == "scale_mode":
            if len(args) != 1 or args[0] not in _SCALE_MODES:
                _fail(f"scale_mode must be one of {', '.join(_SCALE_MODES)}", line_no, line,
                      args[0] if args else key)
            fields["scale_mode"] = args[0]
        elif key == "mid_dw":
            if len(args) != 1 or args[0] not in ("true", "false"):
                _fail("mid_dw must be true or false", line_no, line,
                      args[0] if args else key)
            fields["mid_dw"] = args[0] == "true"
        elif key == "stem":
            try:
                stem = tuple(int(a) for a in args)
            except ValueError:
                stem = ()
            if len(stem) != 3:
                _fail("stem needs three channel counts", line_no, line,
                      args[0] if args else key)
        elif key == "stage":
            row = _parse_stage(args, line_no, line)
            row["line"] = line_no
            stage_rows.append(row)
        else:
            _fail(f"unknown field {key!r}", line_no, line, key)

    if "schema_version" not in fields:
        raise SpecParseError("missing schema_version", 1, 1)
    if "classes" not in fields:
        raise SpecParseError("missing classes", 1, 1)

    table = None
    if stem is not None or stage_rows:
        if "variant" in fields:
            raise SpecParseError("variant and explicit stage table are mutually exclusive",
                                 stage_rows[0]["line"] if stage_rows else 1, 1)
        if stem is None:
            raise SpecParseError("explicit table needs a stem line",
                                 stage_rows[0]["line"], 1)
        if len(stage_rows) != 4:
            raise SpecParseError(f"explicit table needs 4 stages, got {len(stage_rows)}",
                                 stage_rows[-1]["line"] if stage_rows else 1, 1)
        stages = []
        for i, r in enumerate(stage_rows):
            try:
                stages.append(StageSpec(
                    kind=r["kind"], pe_channels=r["channels"][0],
                    downsample=(i > 0), channels=r["channels"],
                    fm_channels=r["fm"], blocks=r["blocks"]))
            except SpecError as e:
                raise SpecParseError(str(e), r["line"], 1) from None
        table = VariantSpec("custom", stem, tuple(stages))
    elif "variant" not in fields:
        raise SpecParseError("spec names neither a variant nor a stage table", 1, 1)

    return ModelSpecFile(
        schema_version=fields["schema_version"],
        classes=fields["classes"],
        variant=fields.get("variant"),
        table=table,
        extras_n=fields.get("extras_n", 2),
        extra_groups=fields.get("extra_groups"),
        scale_mode=fields.get("scale_mode", "paper_literal"),
        mid_dw=fields.get("mid_dw", True),
    )


def serialize_model_spec(ms: ModelSpecFile) -> str:
    lines = [f"schema_version {ms.schema_version}", f"classes {ms.classes}"]
    if ms.variant:
        lines.append(f"variant {ms.variant}")
    else:
        lines.append("stem " + " ".join(str(c) for c in ms.table.stem_channels))
        for st in ms.table.stages:
            row = f"stage {st.kind} channels={','.join(str(c) for c in st.channels)}"
            if st.fm_channels:
                row += f" fm={st.fm_channels}"
            row += f" blocks={st.blocks}"
            lines.append(row)
    lines.append(f"extras_n {ms.extras_n}")
    if ms.extra_groups:
        lines.append("extra_groups " + " ".join(str(g) for g in ms.extra_groups))
    lines.append(f"scale_mode {ms.scale_mode}")
    lines.append(f"mid_dw {'true' if ms.mid_dw else 'false'}")
    return "\n".join(lines) + "\n"


def read_model_spec(path) -> ModelSpecFile:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model_spec(fh.read())


def write_model_spec(ms: ModelSpecFile, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_model_spec(ms))


# ---------------------------------------------------------------------------
# weight container


def _pack_entries(entries: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        if arr.dtype != np.float32:
            raise WeightFormatError(f"{name}: only float32 tensors are stored, got {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise WeightFormatError(f"entry name too long ({len(nb)} bytes)")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", 0, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def write_weights(path, form: str, entries: dict[str, np.ndarray]):
    if form not in _FORM_TAGS:
        raise WeightFormatError(f"unknown model form {form!r}")
    body = _pack_entries(entries)
    blob = MAGIC + struct.pack("<IB", VERSION, _FORM_TAGS[form]) + body
    blob += struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(blob)


def save_weights(model: Model, path):
    form = "deployed" if getattr(model, "deployed", False) else "training"
    write_weights(path, form, model.state_dict())


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.at = offset

    def take(self, n: int, what: str) -> bytes:
        if self.at + n > len(self.blob):
            raise WeightFormatError(f"truncated file while reading {what}")
        chunk = self.blob[self.at:self.at + n]
        self.at += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 13:
        raise WeightFormatError("file too short to be a weight container")
    if blob[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {blob[:4]!r}")
    version, form_tag = struct.unpack("<IB", blob[4:9])
    if version != VERSION:
        raise WeightFormatError(f"unsupported container version {version}")
    if form_tag not in _FORM_NAMES:
        raise WeightFormatError(f"unknown form tag {form_tag}")
    body, (stored_crc,) = blob[9:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored_crc:
        raise WeightFormatError("checksum mismatch: payload is corrupt")

    r = _Reader(blob, 9)
    (count,) = r.unpack("<I", "entry count")
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"entry {i} name length")
        name = r.take(name_len, f"entry {i} name").decode("utf-8")
        dtype_tag, rank = r.unpack("<BB", f"{name} header")
        if dtype_tag != 0:
            raise WeightFormatError(f"{name}: unknown dtype tag {dtype_tag}")
        dims = r.unpack(f"<{rank}I", f"{name} dims") if rank else ()
        n_vals = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * n_vals, f"{name} payload")
        if name in entries:
            raise WeightFormatError(f"duplicate entry name {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.at != len(blob) - 4:
        raise WeightFormatError(f"{len(blob) - 4 - r.at} stray bytes after the entry table")
    return _FORM_NAMES[form_tag], entries
