"""File formats: binary tensors and checkpoints, PGM rasters, CSV reports, SVG ROC plots,
and the on-disk dataset layout."""
from __future__ import annotations

import csv
import io
import math
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, Path]
MAGIC = b"TND1"


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""


# -- tensors -----------------------------------------------------------------

def tensor_to_bytes(arr) -> bytes:
    a = np.asarray(arr)
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad tensor magic")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = start + 4 * count
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).astype(np.float32).reshape(dims)
    return arr, end


def save_tensor(path: PathLike, arr) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path: PathLike) -> np.ndarray:
    arr, end = tensor_from_bytes(Path(path).read_bytes())
    return arr


def save_checkpoint(path: PathLike, state: Mapping[str, np.ndarray]) -> None:
    """Records of (u32 name length, name, tensor bytes) followed by a u32 record count."""
    out = io.BytesIO()
    for name, arr in state.items():
        key = name.encode("utf-8")
        out.write(struct.pack("<I", len(key)))
        out.write(key)
        out.write(tensor_to_bytes(arr))
    out.write(struct.pack("<I", len(state)))
    Path(path).write_bytes(out.getvalue())


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError("checkpoint too short")
    (count,) = struct.unpack_from("<I", buf, len(buf) - 4)
    state: Dict[str, np.ndarray] = {}
    pos, body = 0, len(buf) - 4
    while pos < body:
        (n,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + n].decode("utf-8")
        state[name], pos = tensor_from_bytes(buf, pos + 4 + n)
    if pos != body or len(state) != count:
        raise FormatError(f"checkpoint declares {count} records, found {len(state)}")
    return state


# -- PGM ---------------------------------------------------------------------

def write_pgm(path: PathLike, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ValueError("PGM pixel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def _tokens(buf: bytes, count: int, pos: int = 2):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1


def read_pgm(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    (w, h, maxval), pos = _tokens(buf, 3)
    if maxval > 255:
        raise FormatError("only 8-bit PGM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def read_image(path: PathLike) -> np.ndarray:
    """PGM natively; PNG through Pillow when it is installed."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise FormatError("PNG import needs Pillow") from exc
        return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    return read_pgm(path)


# -- CSV and SVG -------------------------------------------------------------

def fmt(v: Optional[float]) -> str:
    return "undefined" if v is None else repr(float(v))


def write_metrics_csv(path: PathLike, rows: Iterable[Tuple[str, Optional[float]]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, fmt(v)])


def read_metrics_csv(path: PathLike) -> Dict[str, Optional[float]]:
    with open(path, newline="") as f:
        return {r["metric"]: (None if r["value"] == "undefined" else float(r["value"]))
                for r in csv.DictReader(f)}


def write_roc_csv(path: PathLike, points: Sequence[Tuple[float, float, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, fpr, tpr in points:
            w.writerow([repr(float(t)), repr(float(fpr)), repr(float(tpr))])


def roc_svg(points: Sequence[Tuple[float, float, float]], auc: float, title: str = "ROC") -> str:
    size, pad = 320, 40
    span = size - 2 * pad
    xy = " ".join(f"{pad + fpr * span:.2f},{size - pad - tpr * span:.2f}" for _, fpr, tpr in points)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="gray" stroke-dasharray="4"/>\n'
        f'<polyline points="{xy}" fill="none" stroke="blue" stroke-width="2"/>\n'
        f'<text x="{pad}" y="{pad - 12}" font-size="14">{title}</text>\n'
        f'<text x="{size - pad - 90}" y="{size - pad - 10}" font-size="13">AUC = {auc:.4f}</text>\n'
        f'<text x="{size / 2 - 40}" y="{size - 10}" font-size="12">false positive rate</text>\n'
        f'<text x="12" y="{size / 2 + 40}" font-size="12" transform="rotate(-90 12 {size / 2 + 40})">true positive rate</text>\n'
        "</svg>\n"
    )


def write_csv_rows(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- dataset directories -----------------------------------------------------

def write_dataset(root: PathLike, samples, spec_text: str = "") -> Path:
    """``images/<id>.pgm``, ``masks/<id>.pgm``, ``labels.csv`` and a ``spec.cfg`` copy."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_pgm(root / "images" / f"{s.id}.pgm", s.image)
        write_pgm(root / "masks" / f"{s.id}.pgm", s.mask)
    write_csv_rows(root / "labels.csv", ["id", "label", "fold"], [(s.id, s.label, s.fold) for s in samples])
    (root / "spec.cfg").write_text(spec_text)
    return root


def read_dataset(root: PathLike):
    """Load a dataset directory into ``Sample`` records (mask values are binarised)."""
    from .synthdata import Sample

    root = Path(root)
    labels = root / "labels.csv"
    if not labels.exists():
        raise FileNotFoundError(f"{labels} not found")
    out = []
    with open(labels, newline="") as f:
        for row in csv.DictReader(f):
            sid = row["id"]
            image = read_image(_find(root / "images", sid))
            mpath = _find(root / "masks", sid, required=False)
            mask = (read_image(mpath) > 0).astype(np.uint8) if mpath else None
            out.append(Sample(image=image, mask=mask, label=int(row["label"]), id=sid,
                              fold=int(row.get("fold") or -1)))
    return out


def _find(folder: Path, sid: str, required: bool = True) -> Optional[Path]:
    for ext in (".pgm", ".png"):
        p = folder / f"{sid}{ext}"
        if p.exists():
            return p
    if required:
        raise FileNotFoundError(f"no image for id {sid!r} in {folder}")
    return None
